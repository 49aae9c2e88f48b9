//! Minimal trainable model family: conv + dense + scaler with hand-written
//! backpropagation and momentum SGD, sized so that sub-model training at
//! ratios down to 1/16 stays meaningful at desk scale.
//!
//! Widths live on "boundaries" between layers: boundary 0 is the raw input
//! channel dim, each conv/dense appends one, the last one is the class dim.
//! Interior boundaries are partitionable; first and last never are. The
//! partition module slices tensors along those boundaries.

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum NeuralError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("input batch shape {got:?} does not match architecture input {expected:?}")]
    BadInput { expected: Vec<usize>, got: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty dataset shard")]
    EmptyShard,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One layer of the model.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv { out_ch: usize, in_ch: usize, kernel: usize, stride: usize, padding: usize },
    Dense { out_dim: usize, in_dim: usize },
    ReLU,
    AvgPool { window: usize },
    Flatten,
    /// Multiplies activations by `1/ratio` to compensate for reduced width.
    Scaler { ratio: f64 },
}

/// A channel-width boundary between layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Boundary {
    pub width: usize,
    pub partitionable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableKind {
    Conv,
    Dense,
}

/// Bookkeeping for one parameterized layer, derived from the arch walk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableLayer {
    /// Index into `ModelArch::layers`.
    pub layer_index: usize,
    pub kind: TrainableKind,
    /// Boundary feeding this layer's input channels.
    pub in_boundary: usize,
    /// Boundary produced by this layer.
    pub out_boundary: usize,
    /// Flat columns per input channel (1 for conv, H*W for dense after
    /// flatten).
    pub in_footprint: usize,
}

/// Model architecture: ordered layers plus input/output contract.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArch {
    pub layers: Vec<LayerSpec>,
    /// Input (channels, height, width).
    pub input: (usize, usize, usize),
    pub class_count: usize,
    boundaries: Vec<Boundary>,
    trainable: Vec<TrainableLayer>,
}

impl ModelArch {
    /// Validate the layer chain and derive boundary/trainable bookkeeping.
    pub fn new(
        input: (usize, usize, usize),
        class_count: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self, NeuralError> {
        let (boundaries, trainable) = walk(&layers, input, class_count)?;
        Ok(Self { layers, input, class_count, boundaries, trainable })
    }

    /// Default desk-scale CNN for 28x28 single-channel inputs, hidden widths
    /// divisible by 16.
    pub fn desk_cnn() -> Self {
        Self::new(
            (1, 28, 28),
            10,
            vec![
                LayerSpec::Conv { out_ch: 16, in_ch: 1, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::ReLU,
                LayerSpec::AvgPool { window: 2 },
                LayerSpec::Conv { out_ch: 32, in_ch: 16, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::ReLU,
                LayerSpec::AvgPool { window: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 10, in_dim: 32 * 7 * 7 },
            ],
        )
        .expect("desk arch is valid")
    }

    /// Plain dense chain over the given hidden widths; input is a flat
    /// vector of `input_dim` features. Used for selection-only simulations
    /// and tiny training tests.
    pub fn dense_chain(
        input_dim: usize,
        hidden: &[usize],
        class_count: usize,
    ) -> Result<Self, NeuralError> {
        let mut layers = vec![LayerSpec::Flatten];
        let mut prev = input_dim;
        for &w in hidden {
            layers.push(LayerSpec::Dense { out_dim: w, in_dim: prev });
            layers.push(LayerSpec::ReLU);
            prev = w;
        }
        layers.push(LayerSpec::Dense { out_dim: class_count, in_dim: prev });
        Self::new((input_dim, 1, 1), class_count, layers)
    }

    pub fn boundaries(&self) -> &[Boundary] {
        &self.boundaries
    }

    pub fn trainable_layers(&self) -> &[TrainableLayer] {
        &self.trainable
    }

    /// Marks a boundary as never partitioned (input/class boundaries
    /// already are).
    pub fn mark_non_partitionable(&mut self, boundary: usize) {
        self.boundaries[boundary].partitionable = false;
    }

    /// Ordinal of `boundary` among partitionable boundaries, if any.
    pub fn partitionable_ordinal(&self, boundary: usize) -> Option<usize> {
        if !self.boundaries[boundary].partitionable {
            return None;
        }
        Some(
            self.boundaries[..boundary]
                .iter()
                .filter(|b| b.partitionable)
                .count(),
        )
    }

    /// Shrinks every partitionable width by `ratio` and inserts a scaler
    /// after each layer whose input width was reduced. `ratio` 1 returns
    /// the arch unchanged.
    pub fn shrink(&self, ratio: crate::partition::Ratio) -> Result<ModelArch, NeuralError> {
        let denom = ratio.denominator();
        if denom == 1 {
            return Ok(self.clone());
        }
        let scale = |b: &Boundary| -> Result<usize, NeuralError> {
            if !b.partitionable {
                return Ok(b.width);
            }
            if b.width % denom != 0 {
                return Err(NeuralError::InvalidArch(format!(
                    "partitionable width {} not divisible by {}",
                    b.width, denom
                )));
            }
            Ok(b.width / denom)
        };

        let mut layers = Vec::with_capacity(self.layers.len());
        let mut ti = self.trainable.iter();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { kernel, stride, padding, .. } => {
                    let t = ti.next().expect("trainable walk in sync");
                    debug_assert_eq!(t.layer_index, i);
                    let in_b = &self.boundaries[t.in_boundary];
                    let out_b = &self.boundaries[t.out_boundary];
                    layers.push(LayerSpec::Conv {
                        out_ch: scale(out_b)?,
                        in_ch: scale(in_b)?,
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                    });
                    if in_b.partitionable {
                        layers.push(LayerSpec::Scaler { ratio: ratio.value() });
                    }
                }
                LayerSpec::Dense { .. } => {
                    let t = ti.next().expect("trainable walk in sync");
                    debug_assert_eq!(t.layer_index, i);
                    let in_b = &self.boundaries[t.in_boundary];
                    let out_b = &self.boundaries[t.out_boundary];
                    layers.push(LayerSpec::Dense {
                        out_dim: scale(out_b)?,
                        in_dim: scale(in_b)? * t.in_footprint,
                    });
                    if in_b.partitionable {
                        layers.push(LayerSpec::Scaler { ratio: ratio.value() });
                    }
                }
                other => layers.push(other.clone()),
            }
        }
        ModelArch::new(self.input, self.class_count, layers)
    }
}

/// Shape/boundary walk; rejects inconsistent chains.
fn walk(
    layers: &[LayerSpec],
    input: (usize, usize, usize),
    class_count: usize,
) -> Result<(Vec<Boundary>, Vec<TrainableLayer>), NeuralError> {
    let (c0, mut h, mut w) = input;
    if c0 == 0 || h == 0 || w == 0 || class_count == 0 {
        return Err(NeuralError::InvalidArch("zero input or class dim".into()));
    }
    let mut boundaries = vec![Boundary { width: c0, partitionable: false }];
    let mut trainable = Vec::new();
    let mut cur_boundary = 0usize;
    let mut channels = c0;
    let mut flat = false;
    let mut footprint = 1usize; // flat columns per channel once flattened

    for (i, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv { out_ch, in_ch, kernel, stride, padding } => {
                if flat {
                    return Err(NeuralError::InvalidArch(format!("conv at {i} after flatten")));
                }
                if *in_ch != channels {
                    return Err(NeuralError::InvalidArch(format!(
                        "conv at {i} expects {in_ch} input channels, chain has {channels}"
                    )));
                }
                if *kernel == 0 || *stride == 0 || *out_ch == 0 {
                    return Err(NeuralError::InvalidArch(format!("conv at {i} has zero dim")));
                }
                let oh = conv_out(h, *kernel, *stride, *padding).ok_or_else(|| {
                    NeuralError::InvalidArch(format!("conv at {i} output height empty"))
                })?;
                let ow = conv_out(w, *kernel, *stride, *padding).ok_or_else(|| {
                    NeuralError::InvalidArch(format!("conv at {i} output width empty"))
                })?;
                boundaries.push(Boundary { width: *out_ch, partitionable: true });
                trainable.push(TrainableLayer {
                    layer_index: i,
                    kind: TrainableKind::Conv,
                    in_boundary: cur_boundary,
                    out_boundary: boundaries.len() - 1,
                    in_footprint: 1,
                });
                cur_boundary = boundaries.len() - 1;
                channels = *out_ch;
                h = oh;
                w = ow;
            }
            LayerSpec::Dense { out_dim, in_dim } => {
                if !flat {
                    return Err(NeuralError::InvalidArch(format!(
                        "dense at {i} requires a flatten before it"
                    )));
                }
                if *in_dim != channels * footprint {
                    return Err(NeuralError::InvalidArch(format!(
                        "dense at {i} expects in_dim {in_dim}, chain has {}",
                        channels * footprint
                    )));
                }
                if *out_dim == 0 {
                    return Err(NeuralError::InvalidArch(format!("dense at {i} has zero out_dim")));
                }
                boundaries.push(Boundary { width: *out_dim, partitionable: true });
                trainable.push(TrainableLayer {
                    layer_index: i,
                    kind: TrainableKind::Dense,
                    in_boundary: cur_boundary,
                    out_boundary: boundaries.len() - 1,
                    in_footprint: footprint,
                });
                cur_boundary = boundaries.len() - 1;
                channels = *out_dim;
                footprint = 1;
            }
            LayerSpec::ReLU => {}
            LayerSpec::AvgPool { window } => {
                if flat {
                    return Err(NeuralError::InvalidArch(format!("pool at {i} after flatten")));
                }
                if *window == 0 || h % window != 0 || w % window != 0 {
                    return Err(NeuralError::InvalidArch(format!(
                        "pool window {window} does not divide {h}x{w}"
                    )));
                }
                h /= window;
                w /= window;
            }
            LayerSpec::Flatten => {
                if flat {
                    return Err(NeuralError::InvalidArch(format!("double flatten at {i}")));
                }
                flat = true;
                footprint = h * w;
            }
            LayerSpec::Scaler { ratio } => {
                if *ratio <= 0.0 {
                    return Err(NeuralError::InvalidArch(format!("scaler at {i} with ratio <= 0")));
                }
            }
        }
    }

    if !flat || channels * footprint != class_count {
        return Err(NeuralError::InvalidArch(format!(
            "chain output {} does not match class count {class_count}",
            channels * footprint
        )));
    }
    match trainable.last() {
        Some(t) if t.kind == TrainableKind::Dense => {}
        _ => return Err(NeuralError::InvalidArch("output layer must be dense".into())),
    }
    // first and last boundaries are never partitioned
    let last = boundaries.len() - 1;
    boundaries[last].partitionable = false;
    Ok((boundaries, trainable))
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Per-layer weight + bias tensors, index-aligned with
/// `ModelArch::trainable_layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub layers: Vec<LayerParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Params {
    pub fn zeros(arch: &ModelArch) -> Self {
        let layers = arch
            .trainable_layers()
            .iter()
            .map(|t| {
                let (ws, bs) = tensor_shapes(arch, t);
                LayerParams {
                    weight: Tensor::zeros(&ws).unwrap(),
                    bias: Tensor::zeros(&bs).unwrap(),
                }
            })
            .collect();
        Self { layers }
    }

    /// Fan-in-scaled uniform init, deterministic for a given rng stream.
    pub fn init(arch: &ModelArch, rng: &mut impl Rng) -> Self {
        let layers = arch
            .trainable_layers()
            .iter()
            .map(|t| {
                let (ws, bs) = tensor_shapes(arch, t);
                let fan_in: usize = ws[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Tensor::from_vec(
                    &ws,
                    (0..ws.iter().product::<usize>())
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                )
                .unwrap();
                let bias = Tensor::from_vec(
                    &bs,
                    (0..bs[0]).map(|_| rng.gen_range(-bound..bound)).collect(),
                )
                .unwrap();
                LayerParams { weight, bias }
            })
            .collect();
        Self { layers }
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }
}

/// Weight/bias tensor shapes of a trainable layer in the given arch.
pub fn tensor_shapes(arch: &ModelArch, t: &TrainableLayer) -> (Vec<usize>, Vec<usize>) {
    match &arch.layers[t.layer_index] {
        LayerSpec::Conv { out_ch, in_ch, kernel, .. } => {
            (vec![*out_ch, *in_ch, *kernel, *kernel], vec![*out_ch])
        }
        LayerSpec::Dense { out_dim, in_dim } => (vec![*out_dim, *in_dim], vec![*out_dim]),
        _ => unreachable!("trainable layer indexes a conv/dense"),
    }
}

/// Cached per-layer inputs from a forward pass (index i = input to layer i;
/// last entry = logits).
pub struct ForwardCache {
    acts: Vec<Tensor>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor {
        self.acts.last().unwrap()
    }
}

/// Runs the network on a batch `[B, C, H, W]`, returning the activation
/// cache whose last entry is the logits `[B, classes]`.
pub fn forward(
    params: &Params,
    arch: &ModelArch,
    batch: &Tensor,
) -> Result<ForwardCache, NeuralError> {
    let (c, h, w) = arch.input;
    if batch.shape().len() != 4 || batch.shape()[1..] != [c, h, w] {
        return Err(NeuralError::BadInput {
            expected: vec![0, c, h, w],
            got: batch.shape().to_vec(),
        });
    }
    let mut acts: Vec<Tensor> = Vec::with_capacity(arch.layers.len() + 1);
    acts.push(batch.clone());
    let mut pi = 0usize;
    for layer in &arch.layers {
        let x = acts.last().unwrap();
        let y = match layer {
            LayerSpec::Conv { out_ch, in_ch, kernel, stride, padding } => {
                let lp = &params.layers[pi];
                pi += 1;
                conv_forward(x, &lp.weight, &lp.bias, *out_ch, *in_ch, *kernel, *stride, *padding)
            }
            LayerSpec::Dense { out_dim, in_dim } => {
                let lp = &params.layers[pi];
                pi += 1;
                dense_forward(x, &lp.weight, &lp.bias, *out_dim, *in_dim)
            }
            LayerSpec::ReLU => relu_forward(x),
            LayerSpec::AvgPool { window } => avgpool_forward(x, *window),
            LayerSpec::Flatten => flatten_forward(x),
            LayerSpec::Scaler { ratio } => scale_tensor(x, 1.0 / ratio),
        };
        acts.push(y);
    }
    Ok(ForwardCache { acts })
}

/// Mean softmax cross-entropy over the batch plus exact parameter gradients.
pub fn backward(
    params: &Params,
    arch: &ModelArch,
    cache: &ForwardCache,
    labels: &[usize],
) -> Result<(f64, Params), NeuralError> {
    let logits = cache.logits();
    let (loss, mut grad) = softmax_cross_entropy(logits, labels, arch.class_count)?;

    let mut grads = Params::zeros(arch);
    let mut pi = params.layers.len();
    for (i, layer) in arch.layers.iter().enumerate().rev() {
        let x = &cache.acts[i];
        grad = match layer {
            LayerSpec::Conv { out_ch, in_ch, kernel, stride, padding } => {
                pi -= 1;
                let lp = &params.layers[pi];
                let (dx, dw, db) = conv_backward(
                    x, &lp.weight, &grad, *out_ch, *in_ch, *kernel, *stride, *padding,
                );
                grads.layers[pi] = LayerParams { weight: dw, bias: db };
                dx
            }
            LayerSpec::Dense { out_dim, in_dim } => {
                pi -= 1;
                let lp = &params.layers[pi];
                let (dx, dw, db) = dense_backward(x, &lp.weight, &grad, *out_dim, *in_dim);
                grads.layers[pi] = LayerParams { weight: dw, bias: db };
                dx
            }
            LayerSpec::ReLU => relu_backward(x, &grad),
            LayerSpec::AvgPool { window } => avgpool_backward(x, &grad, *window),
            LayerSpec::Flatten => Tensor::from_vec(x.shape(), grad.data().to_vec()).unwrap(),
            LayerSpec::Scaler { ratio } => scale_tensor(&grad, 1.0 / ratio),
        };
    }
    Ok((loss, grads))
}

/// Training hyperparameters for local SGD.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.learning_rate <= 0.0 {
            return Err(NeuralError::InvalidArch("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NeuralError::InvalidArch("momentum must be in [0,1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(NeuralError::InvalidArch("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(NeuralError::InvalidArch("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Classical momentum with coupled weight decay:
/// `v' = m*v + g + wd*p; p' = p - lr*v'`.
pub fn sgd_step(
    params: &Params,
    grads: &Params,
    momentum_state: &Params,
    cfg: &TrainConfig,
) -> (Params, Params) {
    let mut new_params = Vec::with_capacity(params.layers.len());
    let mut new_state = Vec::with_capacity(params.layers.len());
    for ((p, g), v) in params.layers.iter().zip(&grads.layers).zip(&momentum_state.layers) {
        let step = |p: &Tensor, g: &Tensor, v: &Tensor| {
            let vd: Vec<f64> = v
                .data()
                .iter()
                .zip(g.data())
                .zip(p.data())
                .map(|((v, g), p)| cfg.momentum * v + g + cfg.weight_decay * p)
                .collect();
            let v2 = Tensor::from_vec(v.shape(), vd).unwrap();
            let p2 = p.add_scaled(&v2, -cfg.learning_rate).unwrap();
            (p2, v2)
        };
        let (w2, wv2) = step(&p.weight, &g.weight, &v.weight);
        let (b2, bv2) = step(&p.bias, &g.bias, &v.bias);
        new_params.push(LayerParams { weight: w2, bias: b2 });
        new_state.push(LayerParams { weight: wv2, bias: bv2 });
    }
    (Params { layers: new_params }, Params { layers: new_state })
}

/// Result of a local training call.
pub struct LocalTrainOutcome {
    pub params: Params,
    /// Mean minibatch loss over all steps taken (0.0 when no steps ran).
    pub mean_loss: f64,
}

/// `cfg.local_epochs` passes of shuffled minibatch SGD over the shard rows
/// given by `indices`. Deterministic for a given rng stream; momentum state
/// starts fresh.
pub fn local_train(
    params: &Params,
    arch: &ModelArch,
    images: &Tensor,
    labels: &[usize],
    indices: &[usize],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<LocalTrainOutcome, NeuralError> {
    use rand::seq::SliceRandom;
    if indices.is_empty() {
        return Err(NeuralError::EmptyShard);
    }
    let mut current = params.clone();
    let mut momentum = Params::zeros(arch);
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    let mut order: Vec<usize> = indices.to_vec();
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, batch_labels) = assemble_batch(images, labels, chunk, arch)?;
            let cache = forward(&current, arch, &batch)?;
            let (loss, grads) = backward(&current, arch, &cache, &batch_labels)?;
            let (p2, m2) = sgd_step(&current, &grads, &momentum, cfg);
            current = p2;
            momentum = m2;
            loss_sum += loss;
            steps += 1;
        }
    }
    let mean_loss = if steps > 0 { loss_sum / steps as f64 } else { 0.0 };
    Ok(LocalTrainOutcome { params: current, mean_loss })
}

/// Fraction of argmax-correct predictions over the given rows.
pub fn evaluate(
    params: &Params,
    arch: &ModelArch,
    images: &Tensor,
    labels: &[usize],
    indices: &[usize],
) -> Result<f64, NeuralError> {
    if indices.is_empty() {
        return Err(NeuralError::EmptyShard);
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let (batch, batch_labels) = assemble_batch(images, labels, chunk, arch)?;
        let cache = forward(params, arch, &batch)?;
        let logits = cache.logits();
        let classes = arch.class_count;
        for (b, &lab) in batch_labels.iter().enumerate() {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == lab {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Copies the selected example rows into a contiguous batch tensor.
pub fn assemble_batch(
    images: &Tensor,
    labels: &[usize],
    indices: &[usize],
    arch: &ModelArch,
) -> Result<(Tensor, Vec<usize>), NeuralError> {
    let row = images.shape()[1..].iter().product::<usize>();
    let mut data = Vec::with_capacity(indices.len() * row);
    let mut batch_labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(&images.data()[i * row..(i + 1) * row]);
        let lab = labels[i];
        if lab >= arch.class_count {
            return Err(NeuralError::LabelOutOfRange { label: lab, classes: arch.class_count });
        }
        batch_labels.push(lab);
    }
    let mut shape = vec![indices.len()];
    shape.extend_from_slice(&images.shape()[1..]);
    Ok((Tensor::from_vec(&shape, data)?, batch_labels))
}

// --- layer kernels -----------------------------------------------------

fn scale_tensor(x: &Tensor, factor: f64) -> Tensor {
    Tensor::from_vec(x.shape(), x.data().iter().map(|v| v * factor).collect()).unwrap()
}

fn relu_forward(x: &Tensor) -> Tensor {
    Tensor::from_vec(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect()).unwrap()
}

fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

fn flatten_forward(x: &Tensor) -> Tensor {
    let b = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    Tensor::from_vec(&[b, rest], x.data().to_vec()).unwrap()
}

fn dense_forward(x: &Tensor, w: &Tensor, bias: &Tensor, out_dim: usize, in_dim: usize) -> Tensor {
    let b = x.shape()[0];
    let xd = x.data();
    let wd = w.data();
    let mut y = vec![0.0; b * out_dim];
    for bi in 0..b {
        let xrow = &xd[bi * in_dim..(bi + 1) * in_dim];
        let yrow = &mut y[bi * out_dim..(bi + 1) * out_dim];
        for m in 0..out_dim {
            let wrow = &wd[m * in_dim..(m + 1) * in_dim];
            let mut acc = bias.data()[m];
            for (a, b) in wrow.iter().zip(xrow) {
                acc += a * b;
            }
            yrow[m] = acc;
        }
    }
    Tensor::from_vec(&[b, out_dim], y).unwrap()
}

fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    out_dim: usize,
    in_dim: usize,
) -> (Tensor, Tensor, Tensor) {
    let b = x.shape()[0];
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; b * in_dim];
    let mut dw = vec![0.0; out_dim * in_dim];
    let mut db = vec![0.0; out_dim];
    for bi in 0..b {
        let xrow = &xd[bi * in_dim..(bi + 1) * in_dim];
        let dyrow = &dyd[bi * out_dim..(bi + 1) * out_dim];
        let dxrow = &mut dx[bi * in_dim..(bi + 1) * in_dim];
        for m in 0..out_dim {
            let g = dyrow[m];
            if g == 0.0 {
                continue;
            }
            db[m] += g;
            let wrow = &wd[m * in_dim..(m + 1) * in_dim];
            let dwrow = &mut dw[m * in_dim..(m + 1) * in_dim];
            for n in 0..in_dim {
                dwrow[n] += g * xrow[n];
                dxrow[n] += g * wrow[n];
            }
        }
    }
    (
        Tensor::from_vec(&[b, in_dim], dx).unwrap(),
        Tensor::from_vec(&[out_dim, in_dim], dw).unwrap(),
        Tensor::from_vec(&[out_dim], db).unwrap(),
    )
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (b, h, iw) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let oh = conv_out(h, k, stride, pad).unwrap();
    let ow = conv_out(iw, k, stride, pad).unwrap();
    let xd = x.data();
    let wd = w.data();
    let mut y = vec![0.0; b * out_ch * oh * ow];

    for bi in 0..b {
        for o in 0..out_ch {
            let ybase = (bi * out_ch + o) * oh * ow;
            let bias_o = bias.data()[o];
            for v in y[ybase..ybase + oh * ow].iter_mut() {
                *v = bias_o;
            }
            for c in 0..in_ch {
                let xbase = (bi * in_ch + c) * h * iw;
                for u in 0..k {
                    for vk in 0..k {
                        let wv = wd[((o * in_ch + c) * k + u) * k + vk];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_window(
                            &mut y[ybase..ybase + oh * ow],
                            &xd[xbase..xbase + h * iw],
                            wv,
                            (oh, ow),
                            (h, iw),
                            (u, vk),
                            stride,
                            pad,
                        );
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, out_ch, oh, ow], y).unwrap()
}

/// y[oy][ox] += wv * x[oy*s+u-p][ox*s+v-p] over the in-bounds range.
#[allow(clippy::too_many_arguments)]
fn accumulate_window(
    y: &mut [f64],
    x: &[f64],
    wv: f64,
    (oh, ow): (usize, usize),
    (h, iw): (usize, usize),
    (u, v): (usize, usize),
    stride: usize,
    pad: usize,
) {
    let _ = h;
    let (oy0, oy1) = out_range(oh, h, u, stride, pad);
    let (ox0, ox1) = out_range(ow, iw, v, stride, pad);
    for oy in oy0..oy1 {
        let iy = oy * stride + u - pad;
        let yrow = &mut y[oy * ow..oy * ow + ow];
        let xrow = &x[iy * iw..iy * iw + iw];
        if stride == 1 {
            let shift = ox0 + v - pad; // in bounds by construction of ox0
            let xs = &xrow[shift..];
            for (yv, xv) in yrow[ox0..ox1].iter_mut().zip(xs) {
                *yv += wv * xv;
            }
        } else {
            for ox in ox0..ox1 {
                let ix = ox * stride + v - pad;
                yrow[ox] += wv * xrow[ix];
            }
        }
    }
}

/// Valid output index range so that `o*stride + t - pad` lands in `[0, size)`.
fn out_range(osize: usize, size: usize, t: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if t >= pad { 0 } else { (pad - t).div_ceil(stride) };
    let hi_num = size + pad;
    let hi = if hi_num > t { ((hi_num - t - 1) / stride + 1).min(osize) } else { 0 };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    out_ch: usize,
    in_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (b, h, iw) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; b * in_ch * h * iw];
    let mut dw = vec![0.0; out_ch * in_ch * k * k];
    let mut db = vec![0.0; out_ch];

    for bi in 0..b {
        for o in 0..out_ch {
            let dybase = (bi * out_ch + o) * oh * ow;
            let dyplane = &dyd[dybase..dybase + oh * ow];
            db[o] += dyplane.iter().sum::<f64>();
            for c in 0..in_ch {
                let xbase = (bi * in_ch + c) * h * iw;
                let xplane = &xd[xbase..xbase + h * iw];
                let dxplane = &mut dx[xbase..xbase + h * iw];
                for u in 0..k {
                    for vk in 0..k {
                        let widx = ((o * in_ch + c) * k + u) * k + vk;
                        let (oy0, oy1) = out_range(oh, h, u, stride, pad);
                        let (ox0, ox1) = out_range(ow, iw, vk, stride, pad);
                        let mut grad_w = 0.0;
                        let wv = wd[widx];
                        for oy in oy0..oy1 {
                            let iy = oy * stride + u - pad;
                            let dyrow = &dyplane[oy * ow..oy * ow + ow];
                            for ox in ox0..ox1 {
                                let ix = ox * stride + vk - pad;
                                let g = dyrow[ox];
                                grad_w += g * xplane[iy * iw + ix];
                                dxplane[iy * iw + ix] += g * wv;
                            }
                        }
                        dw[widx] += grad_w;
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(&[b, in_ch, h, iw], dx).unwrap(),
        Tensor::from_vec(&[out_ch, in_ch, k, k], dw).unwrap(),
        Tensor::from_vec(&[out_ch], db).unwrap(),
    )
}

fn avgpool_forward(x: &Tensor, window: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / window, w / window);
    let inv = 1.0 / (window * window) as f64;
    let xd = x.data();
    let mut y = vec![0.0; b * c * oh * ow];
    for bc in 0..b * c {
        let xplane = &xd[bc * h * w..(bc + 1) * h * w];
        let yplane = &mut y[bc * oh * ow..(bc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..window {
                    let row = (oy * window + dy) * w + ox * window;
                    for dx in 0..window {
                        acc += xplane[row + dx];
                    }
                }
                yplane[oy * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::from_vec(&[b, c, oh, ow], y).unwrap()
}

fn avgpool_backward(x: &Tensor, dy: &Tensor, window: usize) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / window, w / window);
    let inv = 1.0 / (window * window) as f64;
    let dyd = dy.data();
    let mut dx = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        let dyplane = &dyd[bc * oh * ow..(bc + 1) * oh * ow];
        let dxplane = &mut dx[bc * h * w..(bc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dyplane[oy * ow + ox] * inv;
                for dyw in 0..window {
                    let row = (oy * window + dyw) * w + ox * window;
                    for dxw in 0..window {
                        dxplane[row + dxw] += g;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, c, h, w], dx).unwrap()
}

/// Mean cross-entropy and logits gradient: `(softmax - onehot) / batch`.
fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    classes: usize,
) -> Result<(f64, Tensor), NeuralError> {
    let b = logits.shape()[0];
    debug_assert_eq!(labels.len(), b);
    let ld = logits.data();
    let mut grad = vec![0.0; b * classes];
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for bi in 0..b {
        let lab = labels[bi];
        if lab >= classes {
            return Err(NeuralError::LabelOutOfRange { label: lab, classes });
        }
        let row = &ld[bi * classes..(bi + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        loss += -(row[lab] - max - denom.ln());
        let grow = &mut grad[bi * classes..(bi + 1) * classes];
        for (c, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            grow[c] = (p - if c == lab { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    Ok((loss * inv_b, Tensor::from_vec(&[b, classes], grad)?))
}

// --- gradient checking --------------------------------------------------

/// Worst finite-difference discrepancy over all parameters.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_layer: usize,
    pub worst_kind: &'static str,
    pub checked: usize,
}

/// Central finite differences (step `h`) against analytic gradients for every
/// parameter. Relative error uses `max(|analytic|, |numeric|, 0.01)` as the
/// denominator so near-zero gradients compare absolutely.
pub fn finite_difference_check(
    params: &Params,
    arch: &ModelArch,
    batch: &Tensor,
    labels: &[usize],
    h: f64,
) -> Result<GradCheckReport, NeuralError> {
    let cache = forward(params, arch, batch)?;
    let (_, grads) = backward(params, arch, &cache, labels)?;
    compare_to_finite_differences(params, arch, batch, labels, &grads, h)
}

/// Compares the supplied analytic gradients against central finite
/// differences. Split out so tests can feed deliberately corrupted
/// gradients and watch the check fail.
pub fn compare_to_finite_differences(
    params: &Params,
    arch: &ModelArch,
    batch: &Tensor,
    labels: &[usize],
    grads: &Params,
    h: f64,
) -> Result<GradCheckReport, NeuralError> {
    let loss_of = |p: &Params| -> Result<f64, NeuralError> {
        let cache = forward(p, arch, batch)?;
        let (loss, _) = softmax_cross_entropy(cache.logits(), labels, arch.class_count)?;
        Ok(loss)
    };

    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst_layer: 0, worst_kind: "weight", checked: 0 };
    for li in 0..params.layers.len() {
        for kind in ["weight", "bias"] {
            let len = match kind {
                "weight" => params.layers[li].weight.len(),
                _ => params.layers[li].bias.len(),
            };
            for idx in 0..len {
                let mut plus = params.clone();
                let mut minus = params.clone();
                perturb(&mut plus, li, kind, idx, h);
                perturb(&mut minus, li, kind, idx, -h);
                let numeric = (loss_of(&plus)? - loss_of(&minus)?) / (2.0 * h);
                let analytic = match kind {
                    "weight" => grads.layers[li].weight.data()[idx],
                    _ => grads.layers[li].bias.data()[idx],
                };
                let rel =
                    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2);
                report.checked += 1;
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst_layer = li;
                    report.worst_kind = if kind == "weight" { "weight" } else { "bias" };
                }
            }
        }
    }
    Ok(report)
}

/// Randomized finite-difference sweep across all layer types: conv at both
/// strides, pooling, flatten, dense and scaler. Returns the worst report
/// over a few generated archs.
pub fn gradcheck_suite(seed: u64) -> Result<GradCheckReport, NeuralError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst =
        GradCheckReport { max_rel_error: 0.0, worst_layer: 0, worst_kind: "weight", checked: 0 };
    for _ in 0..2 {
        let c0 = rng.gen_range(1..=2);
        let c1 = rng.gen_range(2..=4);
        let c2 = rng.gen_range(2..=4);
        let hidden = rng.gen_range(3..=6);
        let classes = rng.gen_range(2..=4);
        let arch = ModelArch::new(
            (c0, 8, 8),
            classes,
            vec![
                LayerSpec::Conv { out_ch: c1, in_ch: c0, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::ReLU,
                LayerSpec::AvgPool { window: 2 },
                LayerSpec::Conv { out_ch: c2, in_ch: c1, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::ReLU,
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: hidden, in_dim: c2 * 2 * 2 },
                LayerSpec::Scaler { ratio: 0.5 },
                LayerSpec::ReLU,
                LayerSpec::Dense { out_dim: classes, in_dim: hidden },
            ],
        )?;
        let params = Params::init(&arch, &mut rng);
        let batch_size = 2;
        let data: Vec<f64> =
            (0..batch_size * c0 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor::from_vec(&[batch_size, c0, 8, 8], data)?;
        let labels: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..classes)).collect();
        let report = finite_difference_check(&params, &arch, &batch, &labels, 1e-5)?;
        if report.max_rel_error > worst.max_rel_error {
            worst.max_rel_error = report.max_rel_error;
            worst.worst_layer = report.worst_layer;
            worst.worst_kind = report.worst_kind;
        }
        worst.checked += report.checked;
    }
    Ok(worst)
}

fn perturb(params: &mut Params, layer: usize, kind: &str, idx: usize, h: f64) {
    let t = match kind {
        "weight" => &params.layers[layer].weight,
        _ => &params.layers[layer].bias,
    };
    let mut data = t.data().to_vec();
    data[idx] += h;
    let nt = Tensor::from_vec(t.shape(), data).unwrap();
    match kind {
        "weight" => params.layers[layer].weight = nt,
        _ => params.layers[layer].bias = nt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cnn() -> ModelArch {
        ModelArch::new(
            (2, 6, 6),
            3,
            vec![
                LayerSpec::Conv { out_ch: 4, in_ch: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::ReLU,
                LayerSpec::AvgPool { window: 2 },
                LayerSpec::Conv { out_ch: 4, in_ch: 4, kernel: 3, stride: 2, padding: 1 },
                LayerSpec::ReLU,
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 3, in_dim: 4 * 2 * 2 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn desk_arch_is_valid_and_partitionable() {
        let arch = ModelArch::desk_cnn();
        let b = arch.boundaries();
        assert_eq!(b.len(), 4);
        assert!(!b[0].partitionable && !b[3].partitionable);
        assert!(b[1].partitionable && b[2].partitionable);
        assert_eq!((b[1].width, b[2].width), (16, 32));
        assert_eq!(arch.trainable_layers().len(), 3);
        assert_eq!(arch.trainable_layers()[2].in_footprint, 49);
    }

    #[test]
    fn arch_rejects_inconsistent_chains() {
        let err = ModelArch::new(
            (1, 8, 8),
            10,
            vec![
                LayerSpec::Conv { out_ch: 4, in_ch: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 10, in_dim: 4 * 64 },
            ],
        );
        assert!(matches!(err, Err(NeuralError::InvalidArch(_))));
    }

    #[test]
    fn shrink_identity_at_ratio_one() {
        let arch = ModelArch::desk_cnn();
        let same = arch.shrink(crate::partition::Ratio::from_letter('a').unwrap()).unwrap();
        assert_eq!(arch, same);
    }

    #[test]
    fn shrink_scales_hidden_widths_only() {
        let arch = ModelArch::new(
            (1, 8, 8),
            10,
            vec![
                LayerSpec::Conv { out_ch: 32, in_ch: 1, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::ReLU,
                LayerSpec::Conv { out_ch: 64, in_ch: 32, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::ReLU,
                LayerSpec::AvgPool { window: 8 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 10, in_dim: 64 },
            ],
        )
        .unwrap();
        let quarter = arch.shrink(crate::partition::Ratio::from_letter('c').unwrap()).unwrap();
        let widths: Vec<usize> = quarter.boundaries().iter().map(|b| b.width).collect();
        assert_eq!(widths, vec![1, 8, 16, 10]);
        // scalers follow layers whose input width shrank
        let scalers = quarter
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Scaler { .. }))
            .count();
        assert_eq!(scalers, 2);
    }

    #[test]
    fn shrink_square_layer_parameter_count_scales_quadratically() {
        let arch = ModelArch::new(
            (1, 4, 4),
            10,
            vec![
                LayerSpec::Conv { out_ch: 16, in_ch: 1, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Conv { out_ch: 16, in_ch: 16, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::AvgPool { window: 4 },
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 10, in_dim: 16 },
            ],
        )
        .unwrap();
        let half = arch.shrink(crate::partition::Ratio::from_letter('b').unwrap()).unwrap();
        let square = |a: &ModelArch| match &a.layers[1] {
            LayerSpec::Conv { out_ch, in_ch, kernel, .. } => out_ch * in_ch * kernel * kernel,
            _ => unreachable!(),
        };
        assert_eq!(square(&half) * 4, square(&arch));
    }

    #[test]
    fn forward_zero_params_zero_logits() {
        let arch = tiny_cnn();
        let params = Params::zeros(&arch);
        let batch = Tensor::filled(&[2, 2, 6, 6], 0.7).unwrap();
        let cache = forward(&params, &arch, &batch).unwrap();
        assert!(cache.logits().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scaler_at_ratio_one_is_identity() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let y = scale_tensor(&x, 1.0 / 1.0);
        assert_eq!(x, y);
    }

    #[test]
    fn one_neuron_net_with_scaler() {
        // logit = w * x / ratio for a single dense weight behind a scaler
        let arch = ModelArch::new(
            (1, 1, 1),
            1,
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { out_dim: 1, in_dim: 1 },
                LayerSpec::Scaler { ratio: 0.25 },
            ],
        )
        .unwrap();
        let mut params = Params::zeros(&arch);
        params.layers[0].weight = Tensor::from_vec(&[1, 1], vec![3.0]).unwrap();
        let batch = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let cache = forward(&params, &arch, &batch).unwrap();
        assert_eq!(cache.logits().data()[0], 3.0 * 2.0 / 0.25);
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let arch = tiny_cnn();
        let params = Params::zeros(&arch);
        let batch = Tensor::filled(&[4, 2, 6, 6], 0.3).unwrap();
        let cache = forward(&params, &arch, &batch).unwrap();
        let (loss, _) = backward(&params, &arch, &cache, &[0, 1, 2, 0]).unwrap();
        assert!((loss - (3.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let arch = tiny_cnn();
        let params = Params::zeros(&arch);
        let batch = Tensor::filled(&[1, 2, 6, 6], 0.3).unwrap();
        let cache = forward(&params, &arch, &batch).unwrap();
        assert!(matches!(
            backward(&params, &arch, &cache, &[3]),
            Err(NeuralError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn duplicated_batch_leaves_loss_and_grads_unchanged() {
        let arch = tiny_cnn();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = Params::init(&arch, &mut rng);
        let base: Vec<f64> = (0..2 * 6 * 6).map(|i| (i as f64 * 0.37).sin()).collect();
        let batch1 = Tensor::from_vec(&[1, 2, 6, 6], base.clone()).unwrap();
        let mut doubled = base.clone();
        doubled.extend_from_slice(&base);
        let batch2 = Tensor::from_vec(&[2, 2, 6, 6], doubled).unwrap();

        let c1 = forward(&params, &arch, &batch1).unwrap();
        let (l1, g1) = backward(&params, &arch, &c1, &[1]).unwrap();
        let c2 = forward(&params, &arch, &batch2).unwrap();
        let (l2, g2) = backward(&params, &arch, &c2, &[1, 1]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.layers.iter().zip(&g2.layers) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgd_step_examples() {
        let arch = ModelArch::dense_chain(1, &[], 1).unwrap();
        // m=0, wd=0: plain p - lr*g
        let mut p = Params::zeros(&arch);
        p.layers[0].weight = Tensor::from_vec(&[1, 1], vec![2.0]).unwrap();
        let mut g = Params::zeros(&arch);
        g.layers[0].weight = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
        let v = Params::zeros(&arch);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 1,
            local_epochs: 1,
        };
        let (p2, _) = sgd_step(&p, &g, &v, &cfg);
        assert!((p2.layers[0].weight.data()[0] - 1.95).abs() < 1e-15);

        // g=0, wd=0, v=0: fixed point
        let g0 = Params::zeros(&arch);
        let (p3, _) = sgd_step(&p, &g0, &v, &cfg);
        assert_eq!(p3.layers[0].weight.data()[0], 2.0);

        // two steps, m=0.9, constant g=1, lr=1, wd=0, from p=0:
        // v1 = 1, p1 = -1; v2 = 1.9, p2 = -2.9
        let cfg = TrainConfig { learning_rate: 1.0, momentum: 0.9, ..cfg };
        let p0 = Params::zeros(&arch);
        g.layers[0].weight = Tensor::from_vec(&[1, 1], vec![1.0]).unwrap();
        let (p1, v1) = sgd_step(&p0, &g, &Params::zeros(&arch), &cfg);
        let (p2, _) = sgd_step(&p1, &g, &v1, &cfg);
        assert!((p2.layers[0].weight.data()[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn local_train_zero_epochs_is_noop() {
        let arch = tiny_cnn();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = Params::init(&arch, &mut rng);
        let images = Tensor::filled(&[4, 2, 6, 6], 0.1).unwrap();
        let labels = vec![0, 1, 2, 0];
        let cfg = TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 2,
            local_epochs: 0,
        };
        let out =
            local_train(&params, &arch, &images, &labels, &[0, 1, 2, 3], &cfg, &mut rng).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.mean_loss, 0.0);
    }

    #[test]
    fn local_train_rejects_empty_shard() {
        let arch = tiny_cnn();
        let params = Params::zeros(&arch);
        let images = Tensor::filled(&[1, 2, 6, 6], 0.1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 2,
            local_epochs: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            local_train(&params, &arch, &images, &[0], &[], &cfg, &mut rng),
            Err(NeuralError::EmptyShard)
        ));
    }

    #[test]
    fn local_train_is_deterministic_and_descends() {
        let arch = ModelArch::dense_chain(4, &[8], 2).unwrap();
        let mut init_rng = ChaCha8Rng::seed_from_u64(11);
        let params = Params::init(&arch, &mut init_rng);
        // linearly separable two-class blob
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..32 {
            let cls = i % 2;
            let sign = if cls == 0 { 1.0 } else { -1.0 };
            let jitter = (i as f64 * 0.17).sin() * 0.1;
            data.extend_from_slice(&[sign + jitter, sign, -sign, -sign + jitter]);
            labels.push(cls);
        }
        let images = Tensor::from_vec(&[32, 4, 1, 1], data).unwrap();
        let idx: Vec<usize> = (0..32).collect();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 8,
            local_epochs: 5,
        };
        let loss_of = |p: &Params| {
            let (batch, bl) = assemble_batch(&images, &labels, &idx, &arch).unwrap();
            let cache = forward(p, &arch, &batch).unwrap();
            backward(p, &arch, &cache, &bl).unwrap().0
        };
        let loss_before = loss_of(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = local_train(&params, &arch, &images, &labels, &idx, &cfg, &mut rng).unwrap();
        let loss_after = loss_of(&out.params);
        assert!(loss_after <= loss_before, "{loss_after} > {loss_before}");

        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let out2 = local_train(&params, &arch, &images, &labels, &idx, &cfg, &mut rng2).unwrap();
        assert_eq!(out.params, out2.params); // bit-identical rerun
    }

    #[test]
    fn evaluate_chance_level_and_argmax_invariance() {
        let arch = ModelArch::dense_chain(2, &[], 10).unwrap();
        // constant predictor: zero params always pick class 0
        let params = Params::zeros(&arch);
        let n = 40;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            data.extend_from_slice(&[i as f64, 1.0]);
            labels.push(i % 10);
        }
        let images = Tensor::from_vec(&[n, 2, 1, 1], data).unwrap();
        let idx: Vec<usize> = (0..n).collect();
        let acc = evaluate(&params, &arch, &images, &labels, &idx).unwrap();
        assert!((acc - 0.1).abs() < 1e-12);

        // positive rescaling of all logits cannot change accuracy
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Params::init(&arch, &mut rng);
        let mut scaled = p.clone();
        for l in &mut scaled.layers {
            l.weight = Tensor::from_vec(
                l.weight.shape(),
                l.weight.data().iter().map(|v| v * 7.5).collect(),
            )
            .unwrap();
            l.bias = Tensor::from_vec(
                l.bias.shape(),
                l.bias.data().iter().map(|v| v * 7.5).collect(),
            )
            .unwrap();
        }
        let a1 = evaluate(&p, &arch, &images, &labels, &idx).unwrap();
        let a2 = evaluate(&scaled, &arch, &images, &labels, &idx).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn evaluate_perfect_memorizer_hits_one() {
        // Hand-built params that route input feature i straight to logit i.
        let arch = ModelArch::dense_chain(3, &[], 3).unwrap();
        let mut params = Params::zeros(&arch);
        params.layers[0].weight =
            Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let images = Tensor::from_vec(
            &[3, 3, 1, 1],
            vec![5.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 5.0],
        )
        .unwrap();
        let acc = evaluate(&params, &arch, &images, &[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn scaler_scales_linear_network_output_exactly() {
        // For a net linear up to the scaler position the scaled output is
        // 1/R times the unscaled one.
        let base = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { out_dim: 4, in_dim: 6 },
            LayerSpec::Dense { out_dim: 2, in_dim: 4 },
        ];
        let with_scaler = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { out_dim: 4, in_dim: 6 },
            LayerSpec::Dense { out_dim: 2, in_dim: 4 },
            LayerSpec::Scaler { ratio: 0.5 },
        ];
        let a1 = ModelArch::new((6, 1, 1), 2, base).unwrap();
        let a2 = ModelArch::new((6, 1, 1), 2, with_scaler).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = Params::init(&a1, &mut rng);
        let batch =
            Tensor::from_vec(&[1, 6, 1, 1], vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4]).unwrap();
        let y1 = forward(&params, &a1, &batch).unwrap();
        let y2 = forward(&params, &a2, &batch).unwrap();
        for (a, b) in y1.logits().data().iter().zip(y2.logits().data()) {
            assert!((a * 2.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_on_all_layer_types() {
        let arch = tiny_cnn();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = Params::init(&arch, &mut rng);
        let data: Vec<f64> = (0..2 * 2 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor::from_vec(&[2, 2, 6, 6], data).unwrap();
        let report = finite_difference_check(&params, &arch, &batch, &[0, 2], 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {} at layer {} {}",
            report.max_rel_error,
            report.worst_layer,
            report.worst_kind
        );
    }

    #[test]
    fn corrupted_gradients_fail_the_check() {
        let arch = tiny_cnn();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = Params::init(&arch, &mut rng);
        let data: Vec<f64> = (0..2 * 2 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor::from_vec(&[2, 2, 6, 6], data).unwrap();
        let cache = forward(&params, &arch, &batch).unwrap();
        let (_, mut grads) = backward(&params, &arch, &cache, &[0, 2]).unwrap();
        // mutate the first conv layer's weight gradient by 50%
        grads.layers[0].weight = Tensor::from_vec(
            grads.layers[0].weight.shape(),
            grads.layers[0].weight.data().iter().map(|v| v * 1.5).collect(),
        )
        .unwrap();
        let report =
            compare_to_finite_differences(&params, &arch, &batch, &[0, 2], &grads, 1e-5).unwrap();
        assert!(report.max_rel_error > 1e-4);
        assert_eq!(report.worst_layer, 0);
    }
}

//! Layer definitions, forward/backward propagation, and mini-batch SGD.
//!
//! Every weighted layer stores its parameters as a [`WeightTensor4D`]. A
//! fully-connected layer with `out` outputs and `in` inputs is stored as an
//! `out × in × 1 × 1` tensor, so grouping schemes and compaction see one
//! geometry for both kinds of layer: "filters" are output units and
//! "channels" are input units.
//!
//! Activations are batch-major `B × C × H × W`; fully-connected layers flatten
//! whatever they receive.

mod gradcheck;
mod layers;
pub mod presets;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ConvGeometry, DenseMatrix, Tensor};

pub use gradcheck::{batch_loss, gradient_check, GradCheck};
pub use layers::{ForwardCache, Gradients, ParamGrad};
pub use train::{evaluate, train, Dataset, EpochMetrics, SgdState, TrainConfig, TrainHistory};

/// Weights `N × C × M × K` of one layer plus one bias per filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTensor4D {
    values: Tensor,
    bias: Vec<f64>,
}

impl WeightTensor4D {
    pub fn new(values: Tensor, bias: Vec<f64>) -> Result<Self> {
        if values.ndim() != 4 {
            return shape_err(format!("weight tensor must be 4-D, got {:?}", values.shape()));
        }
        if bias.len() != values.shape()[0] {
            return shape_err(format!(
                "bias has {} entries for {} filters",
                bias.len(),
                values.shape()[0]
            ));
        }
        Ok(Self { values, bias })
    }

    pub fn zeros(n: usize, c: usize, m: usize, k: usize) -> Self {
        Self {
            values: Tensor::zeros(&[n, c, m, k]),
            bias: vec![0.0; n],
        }
    }

    /// `[N, C, M, K]`.
    pub fn dims(&self) -> [usize; 4] {
        let s = self.values.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn n_filters(&self) -> usize {
        self.dims()[0]
    }

    pub fn n_channels(&self) -> usize {
        self.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.dims()[3]
    }

    /// `C·M·K`, the length of one filter.
    pub fn filter_len(&self) -> usize {
        let [_, c, m, k] = self.dims();
        c * m * k
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        self.values.data()
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        self.values.data_mut()
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn weight_len(&self) -> usize {
        self.values.len()
    }

    /// Weights followed by biases; group indices address this flat array.
    pub fn param_len(&self) -> usize {
        self.values.len() + self.bias.len()
    }

    pub fn param(&self, idx: usize) -> f64 {
        let nw = self.weight_len();
        if idx < nw {
            self.values.data()[idx]
        } else {
            self.bias[idx - nw]
        }
    }

    pub fn set_param(&mut self, idx: usize, v: f64) {
        let nw = self.weight_len();
        if idx < nw {
            self.values.data_mut()[idx] = v;
        } else {
            self.bias[idx - nw] = v;
        }
    }

    /// The `N × (C·M·K)` GEMM weight matrix.
    pub fn lowered(&self) -> DenseMatrix {
        DenseMatrix::new(self.n_filters(), self.filter_len(), self.values.data().to_vec())
            .expect("weight tensor extents are consistent")
    }
}

/// Topology description of one layer, without parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        name: String,
        filters: usize,
        kernel: [usize; 2],
        #[serde(default = "unit_stride")]
        stride: [usize; 2],
        #[serde(default)]
        pad: [usize; 2],
    },
    Fc {
        name: String,
        outputs: usize,
    },
    Relu,
    MaxPool {
        size: [usize; 2],
        stride: [usize; 2],
    },
    Softmax,
    ResidualBegin {
        id: usize,
    },
    ResidualEnd {
        id: usize,
    },
}

fn unit_stride() -> [usize; 2] {
    [1, 1]
}

/// Convolution layer. `live_fibers`, when set, lists the columns of the
/// lowered weight matrix (shape fibers `(c, m, k)`) that take part in the GEMM;
/// all other fibers are structurally absent.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub weights: WeightTensor4D,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub live_fibers: Option<Vec<usize>>,
    /// Weights pinned at zero (`true`) by compaction; SGD never moves them.
    pub zero_mask: Option<Vec<bool>>,
}

impl ConvLayer {
    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(
            (self.weights.height(), self.weights.width()),
            self.stride,
            self.pad,
        )
    }

    pub fn live_fiber_count(&self) -> usize {
        self.live_fibers
            .as_ref()
            .map_or(self.weights.filter_len(), Vec::len)
    }
}

/// Fully-connected layer, weights `out × in × 1 × 1`. `input_index`, when
/// set, gathers the listed entries of the flattened incoming activation; its
/// length is then the layer's `in`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcLayer {
    pub name: String,
    pub weights: WeightTensor4D,
    pub input_index: Option<Vec<usize>>,
    pub zero_mask: Option<Vec<bool>>,
}

impl FcLayer {
    pub fn outputs(&self) -> usize {
        self.weights.n_filters()
    }

    pub fn inputs(&self) -> usize {
        self.weights.n_channels()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvLayer),
    Fc(FcLayer),
    Relu,
    MaxPool {
        size: (usize, usize),
        stride: (usize, usize),
    },
    Softmax,
    ResidualBegin {
        id: usize,
    },
    ResidualEnd {
        id: usize,
    },
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                name: c.name.clone(),
                filters: c.weights.n_filters(),
                kernel: [c.weights.height(), c.weights.width()],
                stride: [c.stride.0, c.stride.1],
                pad: [c.pad.0, c.pad.1],
            },
            Layer::Fc(f) => LayerSpec::Fc {
                name: f.name.clone(),
                outputs: f.outputs(),
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool { size, stride } => LayerSpec::MaxPool {
                size: [size.0, size.1],
                stride: [stride.0, stride.1],
            },
            Layer::Softmax => LayerSpec::Softmax,
            Layer::ResidualBegin { id } => LayerSpec::ResidualBegin { id: *id },
            Layer::ResidualEnd { id } => LayerSpec::ResidualEnd { id: *id },
        }
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv(c) => Some(&c.name),
            Layer::Fc(f) => Some(&f.name),
            _ => None,
        }
    }

    pub fn weights(&self) -> Option<&WeightTensor4D> {
        match self {
            Layer::Conv(c) => Some(&c.weights),
            Layer::Fc(f) => Some(&f.weights),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut WeightTensor4D> {
        match self {
            Layer::Conv(c) => Some(&mut c.weights),
            Layer::Fc(f) => Some(&mut f.weights),
            _ => None,
        }
    }

    pub fn zero_mask(&self) -> Option<&[bool]> {
        match self {
            Layer::Conv(c) => c.zero_mask.as_deref(),
            Layer::Fc(f) => f.zero_mask.as_deref(),
            _ => None,
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Fc(_))
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv(_))
    }
}

/// Per-sample activation extents `[C, H, W]`.
pub type Shape3 = [usize; 3];

/// A residual block spanning `layers[begin..=end]` with an identity shortcut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualBlock {
    pub id: usize,
    pub begin: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    input_shape: Shape3,
    layers: Vec<Layer>,
}

impl NetworkModel {
    /// Validates conformability of every adjacent pair of layers and the
    /// pairing of residual markers.
    pub fn new(input_shape: Shape3, layers: Vec<Layer>) -> Result<Self> {
        let model = Self {
            input_shape,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    /// Builds a network from its topology with fan-in scaled uniform weights
    /// `U(-sqrt(3/fan_in), sqrt(3/fan_in))` and zero biases.
    pub fn from_specs(input_shape: Shape3, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape;
        let mut init = |n: usize, c: usize, m: usize, k: usize| {
            let bound = (3.0 / (c * m * k) as f64).sqrt();
            let values = Tensor::from_fn(&[n, c, m, k], |_| rng.gen_range(-bound..bound));
            WeightTensor4D::new(values, vec![0.0; n]).expect("consistent extents")
        };
        for spec in specs {
            let layer = match spec {
                LayerSpec::Conv {
                    name,
                    filters,
                    kernel,
                    stride,
                    pad,
                } => {
                    if *filters == 0 {
                        return Err(Error::Config(format!("{name}: zero filters")));
                    }
                    Layer::Conv(ConvLayer {
                        name: name.clone(),
                        weights: init(*filters, shape[0], kernel[0], kernel[1]),
                        stride: (stride[0], stride[1]),
                        pad: (pad[0], pad[1]),
                        live_fibers: None,
                        zero_mask: None,
                    })
                }
                LayerSpec::Fc { name, outputs } => {
                    if *outputs == 0 {
                        return Err(Error::Config(format!("{name}: zero outputs")));
                    }
                    Layer::Fc(FcLayer {
                        name: name.clone(),
                        weights: init(*outputs, shape.iter().product(), 1, 1),
                        input_index: None,
                        zero_mask: None,
                    })
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size, stride } => Layer::MaxPool {
                    size: (size[0], size[1]),
                    stride: (stride[0], stride[1]),
                },
                LayerSpec::Softmax => Layer::Softmax,
                LayerSpec::ResidualBegin { id } => Layer::ResidualBegin { id: *id },
                LayerSpec::ResidualEnd { id } => Layer::ResidualEnd { id: *id },
            };
            shape = layer_output_shape(&layer, shape)?;
            layers.push(layer);
        }
        Self::new(input_shape, layers)
    }

    fn validate(&self) -> Result<()> {
        if self.input_shape.iter().any(|&d| d == 0) {
            return shape_err("input extents must be >= 1");
        }
        let mut shape = self.input_shape;
        let mut open: Vec<(usize, Shape3)> = Vec::new();
        let mut seen_ids = std::collections::HashSet::new();
        let mut names = std::collections::HashSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(name) = layer.name() {
                if !names.insert(name.to_string()) {
                    return Err(Error::Config(format!("duplicate layer name {name}")));
                }
            }
            match layer {
                Layer::Softmax if i + 1 != self.layers.len() => {
                    return shape_err("softmax must be the final layer");
                }
                Layer::ResidualBegin { id } => {
                    if !seen_ids.insert(*id) {
                        return Err(Error::Config(format!("residual id {id} used twice")));
                    }
                    open.push((*id, shape));
                }
                Layer::ResidualEnd { id } => match open.pop() {
                    Some((open_id, entry)) if open_id == *id => {
                        if entry != shape {
                            return shape_err(format!(
                                "residual block {id}: shortcut {entry:?} and inner path {shape:?} differ; only identity shortcuts are supported"
                            ));
                        }
                    }
                    _ => {
                        return Err(Error::Config(format!(
                            "residual end {id} does not close the innermost open block"
                        )))
                    }
                },
                _ => {}
            }
            shape = layer_output_shape(layer, shape)
                .map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
        }
        if let Some((id, _)) = open.pop() {
            return Err(Error::Config(format!("residual block {id} is never closed")));
        }
        if !self.layers.iter().any(Layer::is_weighted) {
            return Err(Error::Config("network has no weighted layer".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for parameter updates. Structural edits must go
    /// through [`NetworkModel::new`] to be re-validated.
    pub fn layer_mut(&mut self, idx: usize) -> &mut Layer {
        &mut self.layers[idx]
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    /// Indices (into [`Self::layers`]) of Conv/FC layers, in order.
    pub fn weighted_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_weighted())
            .collect()
    }

    /// Number of weighted layers.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| l.is_weighted()).count()
    }

    pub fn find_layer(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name() == Some(name))
    }

    pub fn weights(&self, idx: usize) -> Option<&WeightTensor4D> {
        self.layers.get(idx).and_then(Layer::weights)
    }

    pub fn weights_mut(&mut self, idx: usize) -> Option<&mut WeightTensor4D> {
        self.layers.get_mut(idx).and_then(Layer::weights_mut)
    }

    /// Input shape of every layer followed by the network output shape.
    pub fn shapes(&self) -> Vec<Shape3> {
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        let mut shape = self.input_shape;
        out.push(shape);
        for layer in &self.layers {
            shape = layer_output_shape(layer, shape).expect("validated model");
            out.push(shape);
        }
        out
    }

    pub fn output_len(&self) -> usize {
        self.shapes().last().map_or(0, |s| s.iter().product())
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::weights)
            .map(WeightTensor4D::param_len)
            .sum()
    }

    pub fn residual_blocks(&self) -> Vec<ResidualBlock> {
        let mut open = Vec::new();
        let mut blocks = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::ResidualBegin { id } => open.push((*id, i)),
                Layer::ResidualEnd { id } => {
                    let (bid, begin) = open.pop().expect("validated model");
                    debug_assert_eq!(bid, *id);
                    blocks.push(ResidualBlock {
                        id: *id,
                        begin,
                        end: i,
                    });
                }
                _ => {}
            }
        }
        blocks.sort_by_key(|b| b.begin);
        blocks
    }

    /// Innermost residual block containing layer `idx`.
    pub fn enclosing_block(&self, idx: usize) -> Option<ResidualBlock> {
        self.residual_blocks()
            .into_iter()
            .filter(|b| b.begin < idx && idx < b.end)
            .min_by_key(|b| b.end - b.begin)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Forward pass keeping the activations needed by [`Self::backward`].
    pub fn forward(&self, batch: &Tensor) -> Result<(DenseMatrix, ForwardCache)> {
        let (logits, cache) = layers::forward(self, batch, true)?;
        Ok((logits, cache.expect("cache requested")))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, batch: &Tensor) -> Result<DenseMatrix> {
        layers::forward(self, batch, false).map(|(logits, _)| logits)
    }

    /// Gradient of the mean softmax cross-entropy with respect to every
    /// parameter.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
        layers::backward(self, cache, labels)
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(Layer::weights)
            .map(|w| w.weights().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

/// Output extents of `layer` for an input of extents `shape`.
pub fn layer_output_shape(layer: &Layer, shape: Shape3) -> Result<Shape3> {
    match layer {
        Layer::Conv(c) => {
            let [cin, h, w] = shape;
            if c.weights.n_channels() != cin {
                return shape_err(format!(
                    "{}: expects {} channels, receives {cin}",
                    c.name,
                    c.weights.n_channels()
                ));
            }
            if let Some(live) = &c.live_fibers {
                if live.windows(2).any(|p| p[0] >= p[1])
                    || live.last().is_some_and(|&f| f >= c.weights.filter_len())
                {
                    return shape_err(format!("{}: live fiber list is invalid", c.name));
                }
            }
            let (ho, wo) = c.geometry().output_extent(h, w)?;
            Ok([c.weights.n_filters(), ho, wo])
        }
        Layer::Fc(f) => {
            let incoming: usize = shape.iter().product();
            let expected = match &f.input_index {
                Some(idx) => {
                    if idx.iter().any(|&i| i >= incoming) {
                        return shape_err(format!("{}: input index out of range", f.name));
                    }
                    idx.len()
                }
                None => incoming,
            };
            if f.inputs() != expected || f.weights.height() != 1 || f.weights.width() != 1 {
                return shape_err(format!(
                    "{}: weights {:?} do not accept {expected} inputs",
                    f.name,
                    f.weights.dims()
                ));
            }
            Ok([f.outputs(), 1, 1])
        }
        Layer::MaxPool { size, stride } => {
            let [c, h, w] = shape;
            let (ho, wo) = ConvGeometry::new(*size, *stride, (0, 0)).output_extent(h, w)?;
            Ok([c, ho, wo])
        }
        Layer::Relu | Layer::Softmax | Layer::ResidualBegin { .. } | Layer::ResidualEnd { .. } => {
            Ok(shape)
        }
    }
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> Result<(f64, DenseMatrix)> {
    let (b, k) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return shape_err(format!("{} labels for a batch of {b}", labels.len()));
    }
    let mut grad = DenseMatrix::zeros(b, k);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return shape_err(format!("label {label} out of range for {k} classes"));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        loss += denom.ln() + max - row[label];
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - max).exp() / denom / b as f64;
        }
        g[label] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &DenseMatrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

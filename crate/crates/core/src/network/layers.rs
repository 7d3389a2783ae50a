use crate::error::{shape_err, Result};
use crate::tensor::{col2im_add, im2col_into, matmul_into, DenseMatrix, LoweringShape, MatRef, Tensor};

use super::{layer_output_shape, softmax_cross_entropy, ConvLayer, FcLayer, Layer, NetworkModel, Shape3};

/// Gradient of the loss with respect to one layer's weights and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGrad {
    fn zeros(w: usize, b: usize) -> Self {
        Self {
            weights: vec![0.0; w],
            bias: vec![0.0; b],
        }
    }

    /// Flat view matching [`super::WeightTensor4D::param`] indexing.
    pub fn get(&self, idx: usize) -> f64 {
        if idx < self.weights.len() {
            self.weights[idx]
        } else {
            self.bias[idx - self.weights.len()]
        }
    }

    pub fn add(&mut self, idx: usize, v: f64) {
        if idx < self.weights.len() {
            self.weights[idx] += v;
        } else {
            let nw = self.weights.len();
            self.bias[idx - nw] += v;
        }
    }
}

/// Parameter gradients for a whole model, aligned with `model.layers()`;
/// parameter-free layers carry `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    layers: Vec<Option<ParamGrad>>,
}

impl Gradients {
    pub fn zeros_like(model: &NetworkModel) -> Self {
        Self {
            layers: model
                .layers()
                .iter()
                .map(|l| {
                    l.weights()
                        .map(|w| ParamGrad::zeros(w.weight_len(), w.bias().len()))
                })
                .collect(),
        }
    }

    pub fn layer(&self, idx: usize) -> Option<&ParamGrad> {
        self.layers.get(idx).and_then(Option::as_ref)
    }

    pub fn layer_mut(&mut self, idx: usize) -> Option<&mut ParamGrad> {
        self.layers.get_mut(idx).and_then(Option::as_mut)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ParamGrad)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (i, g)))
    }

    pub fn is_finite(&self) -> bool {
        self.iter()
            .all(|(_, g)| g.weights.iter().chain(&g.bias).all(|v| v.is_finite()))
    }

    pub fn sq_norm(&self) -> f64 {
        self.iter()
            .map(|(_, g)| g.weights.iter().chain(&g.bias).map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                    *x += scale * y;
                }
                for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                    *x += scale * y;
                }
            }
        }
    }
}

enum Aux {
    None,
    Conv { cols: Vec<f64> },
    Pool { argmax: Vec<u32> },
    Fc { x: Vec<f64> },
}

/// Activations recorded by a forward pass.
pub struct ForwardCache {
    batch: usize,
    inputs: Vec<Vec<f64>>,
    aux: Vec<Aux>,
    shapes: Vec<Shape3>,
    logits: DenseMatrix,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn logits(&self) -> &DenseMatrix {
        &self.logits
    }
}

fn batch_extent(model: &NetworkModel, batch: &Tensor) -> Result<usize> {
    let per_sample: usize = model.input_shape().iter().product();
    let b = batch.shape()[0];
    let got: usize = batch.shape()[1..].iter().product();
    let matches = match batch.ndim() {
        4 => batch.shape()[1..] == model.input_shape(),
        2 => got == per_sample,
        _ => false,
    };
    if !matches {
        return shape_err(format!(
            "batch {:?} does not match model input {:?}",
            batch.shape(),
            model.input_shape()
        ));
    }
    Ok(b)
}

pub(super) fn forward(
    model: &NetworkModel,
    batch: &Tensor,
    keep: bool,
) -> Result<(DenseMatrix, Option<ForwardCache>)> {
    let b = batch_extent(model, batch)?;
    let mut x = batch.data().to_vec();
    let mut shape = model.input_shape();
    let mut inputs = Vec::new();
    let mut aux = Vec::new();
    let mut shapes = Vec::new();
    let mut shortcuts: Vec<Vec<f64>> = Vec::new();

    for layer in model.layers() {
        let out_shape = layer_output_shape(layer, shape)?;
        let (y, a) = match layer {
            Layer::Conv(c) => conv_forward(c, &x, b, shape, out_shape, keep)?,
            Layer::Fc(f) => fc_forward(f, &x, b, shape, keep)?,
            Layer::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), Aux::None),
            Layer::MaxPool { size, stride } => pool_forward(&x, b, shape, out_shape, *size, *stride),
            Layer::Softmax => (x.clone(), Aux::None),
            Layer::ResidualBegin { .. } => {
                shortcuts.push(x.clone());
                (x.clone(), Aux::None)
            }
            Layer::ResidualEnd { .. } => {
                let skip = shortcuts.pop().expect("validated residual pairing");
                (x.iter().zip(&skip).map(|(a, s)| a + s).collect(), Aux::None)
            }
        };
        if keep {
            inputs.push(std::mem::replace(&mut x, y));
            aux.push(a);
            shapes.push(shape);
        } else {
            x = y;
        }
        shape = out_shape;
    }

    let k: usize = shape.iter().product();
    let logits = DenseMatrix::new(b, k, x)?;
    let cache = keep.then(|| ForwardCache {
        batch: b,
        inputs,
        aux,
        shapes,
        logits: logits.clone(),
    });
    Ok((logits, cache))
}

fn conv_forward(
    c: &ConvLayer,
    x: &[f64],
    b: usize,
    in_shape: Shape3,
    out_shape: Shape3,
    keep: bool,
) -> Result<(Vec<f64>, Aux)> {
    let lowering = LoweringShape::new(in_shape[0], in_shape[1], in_shape[2], c.geometry())?;
    let hw = lowering.positions();
    let sample_len = in_shape.iter().product::<usize>();
    let live = c.live_fibers.as_deref();
    let rows = c.live_fiber_count();
    let ld = b * hw;
    let mut cols = vec![0.0; rows * ld];
    for s in 0..b {
        im2col_into(
            &x[s * sample_len..(s + 1) * sample_len],
            &lowering,
            live,
            &mut cols,
            ld,
            s * hw,
        );
    }
    let n = c.weights.n_filters();
    let w_live = live_weight_matrix(c);
    let mut ym = vec![0.0; n * ld];
    matmul_into(1.0, MatRef::new(&w_live, n, rows), MatRef::new(&cols, rows, ld), 0.0, &mut ym)?;
    debug_assert_eq!(out_shape[0], n);
    let mut y = vec![0.0; b * n * hw];
    let bias = c.weights.bias();
    for f in 0..n {
        let src = &ym[f * ld..(f + 1) * ld];
        for s in 0..b {
            let dst = &mut y[(s * n + f) * hw..(s * n + f + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(&src[s * hw..(s + 1) * hw]) {
                *d = v + bias[f];
            }
        }
    }
    let aux = if keep { Aux::Conv { cols } } else { Aux::None };
    Ok((y, aux))
}

/// Lowered weights restricted to live fibers, `N × live`.
fn live_weight_matrix(c: &ConvLayer) -> Vec<f64> {
    let w = c.weights.weights();
    match &c.live_fibers {
        None => w.to_vec(),
        Some(live) => {
            let flen = c.weights.filter_len();
            let mut out = Vec::with_capacity(c.weights.n_filters() * live.len());
            for f in 0..c.weights.n_filters() {
                let row = &w[f * flen..(f + 1) * flen];
                out.extend(live.iter().map(|&j| row[j]));
            }
            out
        }
    }
}

fn fc_forward(f: &FcLayer, x: &[f64], b: usize, in_shape: Shape3, keep: bool) -> Result<(Vec<f64>, Aux)> {
    let incoming: usize = in_shape.iter().product();
    let inputs = f.inputs();
    let gathered;
    let xin: &[f64] = match &f.input_index {
        None => x,
        Some(idx) => {
            let mut g = Vec::with_capacity(b * idx.len());
            for s in 0..b {
                let row = &x[s * incoming..(s + 1) * incoming];
                g.extend(idx.iter().map(|&i| row[i]));
            }
            gathered = g;
            &gathered
        }
    };
    let out = f.outputs();
    let mut y = vec![0.0; b * out];
    for s in 0..b {
        y[s * out..(s + 1) * out].copy_from_slice(f.weights.bias());
    }
    let w = MatRef::new(f.weights.weights(), out, inputs);
    matmul_into(1.0, MatRef::new(xin, b, inputs), w.t(), 1.0, &mut y)?;
    let aux = if keep {
        Aux::Fc { x: xin.to_vec() }
    } else {
        Aux::None
    };
    Ok((y, aux))
}

fn pool_forward(
    x: &[f64],
    b: usize,
    in_shape: Shape3,
    out_shape: Shape3,
    size: (usize, usize),
    stride: (usize, usize),
) -> (Vec<f64>, Aux) {
    let [c, h, w] = in_shape;
    let [_, ho, wo] = out_shape;
    let mut y = vec![0.0; b * c * ho * wo];
    let mut argmax = vec![0u32; y.len()];
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..size.0 {
                    let row = base + (oy * stride.0 + ky) * w + ox * stride.1;
                    for kx in 0..size.1 {
                        let v = x[row + kx];
                        if v > best {
                            best = v;
                            best_i = row + kx;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                y[o] = best;
                argmax[o] = best_i as u32;
            }
        }
    }
    (y, Aux::Pool { argmax })
}

pub(super) fn backward(model: &NetworkModel, cache: &ForwardCache, labels: &[usize]) -> Result<Gradients> {
    if cache.inputs.len() != model.layers().len() {
        return shape_err("forward cache does not belong to this model");
    }
    let (_, dlogits) = softmax_cross_entropy(&cache.logits, labels)?;
    let b = cache.batch;
    let mut grads = Gradients::zeros_like(model);
    let mut g = dlogits.into_data();
    let mut skip_grads: Vec<Vec<f64>> = Vec::new();
    let first_weighted = model.weighted_layers()[0];

    for (i, layer) in model.layers().iter().enumerate().rev() {
        let x = &cache.inputs[i];
        let in_shape = cache.shapes[i];
        let need_input_grad = i > first_weighted;
        g = match (layer, &cache.aux[i]) {
            (Layer::Conv(c), Aux::Conv { cols }) => {
                let pg = grads.layers[i].as_mut().expect("weighted layer");
                conv_backward(c, cols, &g, b, in_shape, pg, need_input_grad)?
            }
            (Layer::Fc(f), Aux::Fc { x: xin }) => {
                let pg = grads.layers[i].as_mut().expect("weighted layer");
                fc_backward(f, xin, &g, b, in_shape, pg, need_input_grad)?
            }
            (Layer::Relu, _) => g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect(),
            (Layer::MaxPool { .. }, Aux::Pool { argmax }) => {
                let mut dx = vec![0.0; x.len()];
                for (&gv, &src) in g.iter().zip(argmax) {
                    dx[src as usize] += gv;
                }
                dx
            }
            (Layer::Softmax, _) => g,
            (Layer::ResidualEnd { .. }, _) => {
                skip_grads.push(g.clone());
                g
            }
            (Layer::ResidualBegin { .. }, _) => {
                let skip = skip_grads.pop().expect("validated residual pairing");
                g.iter().zip(&skip).map(|(a, s)| a + s).collect()
            }
            _ => return shape_err("forward cache was recorded without activations"),
        };
    }
    Ok(grads)
}

fn conv_backward(
    c: &ConvLayer,
    cols: &[f64],
    dy: &[f64],
    b: usize,
    in_shape: Shape3,
    pg: &mut ParamGrad,
    need_input_grad: bool,
) -> Result<Vec<f64>> {
    let lowering = LoweringShape::new(in_shape[0], in_shape[1], in_shape[2], c.geometry())?;
    let hw = lowering.positions();
    let n = c.weights.n_filters();
    let rows = c.live_fiber_count();
    let ld = b * hw;
    // dY as N × (B·HW), matching the forward GEMM layout.
    let mut dym = vec![0.0; n * ld];
    for s in 0..b {
        for f in 0..n {
            dym[f * ld + s * hw..f * ld + (s + 1) * hw]
                .copy_from_slice(&dy[(s * n + f) * hw..(s * n + f + 1) * hw]);
        }
    }
    for f in 0..n {
        pg.bias[f] = dym[f * ld..(f + 1) * ld].iter().sum();
    }
    let mut dw_live = vec![0.0; n * rows];
    matmul_into(
        1.0,
        MatRef::new(&dym, n, ld),
        MatRef::new(cols, rows, ld).t(),
        0.0,
        &mut dw_live,
    )?;
    match &c.live_fibers {
        None => pg.weights.copy_from_slice(&dw_live),
        Some(live) => {
            let flen = c.weights.filter_len();
            pg.weights.fill(0.0);
            for f in 0..n {
                for (r, &j) in live.iter().enumerate() {
                    pg.weights[f * flen + j] = dw_live[f * rows + r];
                }
            }
        }
    }
    if !need_input_grad {
        return Ok(Vec::new());
    }
    let w_live = live_weight_matrix(c);
    let mut dcols = vec![0.0; rows * ld];
    matmul_into(
        1.0,
        MatRef::new(&w_live, n, rows).t(),
        MatRef::new(&dym, n, ld),
        0.0,
        &mut dcols,
    )?;
    let sample_len: usize = in_shape.iter().product();
    let mut dx = vec![0.0; b * sample_len];
    for s in 0..b {
        col2im_add(
            &dcols,
            &lowering,
            c.live_fibers.as_deref(),
            ld,
            s * hw,
            &mut dx[s * sample_len..(s + 1) * sample_len],
        );
    }
    Ok(dx)
}

fn fc_backward(
    f: &FcLayer,
    xin: &[f64],
    dy: &[f64],
    b: usize,
    in_shape: Shape3,
    pg: &mut ParamGrad,
    need_input_grad: bool,
) -> Result<Vec<f64>> {
    let (out, inputs) = (f.outputs(), f.inputs());
    for (j, gb) in pg.bias.iter_mut().enumerate() {
        *gb = (0..b).map(|s| dy[s * out + j]).sum();
    }
    matmul_into(
        1.0,
        MatRef::new(dy, b, out).t(),
        MatRef::new(xin, b, inputs),
        0.0,
        &mut pg.weights,
    )?;
    if !need_input_grad {
        return Ok(Vec::new());
    }
    let mut dxin = vec![0.0; b * inputs];
    matmul_into(
        1.0,
        MatRef::new(dy, b, out),
        MatRef::new(f.weights.weights(), out, inputs),
        0.0,
        &mut dxin,
    )?;
    match &f.input_index {
        None => Ok(dxin),
        Some(idx) => {
            let incoming: usize = in_shape.iter().product();
            let mut dx = vec![0.0; b * incoming];
            for s in 0..b {
                for (r, &i) in idx.iter().enumerate() {
                    dx[s * incoming + i] += dxin[s * inputs + r];
                }
            }
            Ok(dx)
        }
    }
}

//! Zero-group detection, physical removal of dead structure, FLOP
//! accounting, and PCA analysis of learned filters.
//!
//! Compaction works on the lowered view of every weighted layer: rows are
//! filters (output units) and columns are shape fibers (input units for
//! fully-connected layers). The activation between a producer and its single
//! consumer is a *unit space*; a unit is removed from it when either the
//! producer's row or the consumer's columns for that unit are dead. Spaces
//! joined by a residual shortcut are never shrunk, since the shortcut would
//! still carry the unit; dead groups there are pinned at zero through the
//! layer's zero mask instead.

use std::collections::HashMap;

use log::warn;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{ConvLayer, FcLayer, Layer, NetworkModel, WeightTensor4D};
use crate::ssl::{enumerate_groups, group_max_abs, is_dead, SslConfig};
use crate::tensor::Tensor;

/// Constant output of a removed producer unit, folded into the consumer's
/// bias.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fold {
    /// Unit of the consumer's incoming space.
    pub unit: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerPlan {
    /// Index into `model.layers()`.
    pub layer: usize,
    pub name: String,
    /// Dead parameters (weights then biases); these are zeroed.
    #[serde(skip)]
    pub dead: Vec<bool>,
    /// Surviving rows of the lowered weight matrix (filters / output units).
    pub rows: Vec<usize>,
    /// Surviving columns: shape fibers `(c·M + m)·K + k` for conv layers,
    /// inputs for fully-connected layers, in the layer's current indexing.
    pub cols: Vec<usize>,
    /// Surviving units of the incoming space when it shrinks.
    pub input_units: Option<Vec<usize>>,
    pub folds: Vec<Fold>,
    /// Deleted together with its residual block.
    pub removed: bool,
}

impl LayerPlan {
    pub fn n_dead(&self) -> usize {
        self.dead.iter().filter(|&&d| d).count()
    }
}

/// What survives zero-group removal, per weighted layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompactPlan {
    pub layers: Vec<LayerPlan>,
    /// Ids of residual blocks replaced by their shortcut.
    pub removed_blocks: Vec<usize>,
}

impl CompactPlan {
    pub fn layer(&self, name: &str) -> Option<&LayerPlan> {
        self.layers.iter().find(|p| p.name == name)
    }

    pub fn is_identity(&self) -> bool {
        self.removed_blocks.is_empty() && self.layers.iter().all(|p| p.n_dead() == 0 && p.folds.is_empty())
    }
}

fn weights_of(model: &NetworkModel, idx: usize) -> &WeightTensor4D {
    model.layers()[idx].weights().expect("weighted layer")
}

/// Per-parameter dead flags from the groups of every effective scheme.
fn dead_masks(model: &NetworkModel, cfg: &SslConfig) -> Result<HashMap<usize, Vec<bool>>> {
    cfg.validate()?;
    let mut masks: HashMap<usize, Vec<bool>> = model
        .weighted_layers()
        .into_iter()
        .map(|i| (i, vec![false; weights_of(model, i).param_len()]))
        .collect();
    for scheme in cfg.effective_schemes() {
        for g in enumerate_groups(&scheme, model)? {
            let w = weights_of(model, g.layer);
            if is_dead(group_max_abs(w, &g.members), cfg.zero_threshold) {
                let mask = masks.get_mut(&g.layer).expect("weighted layer");
                for &i in &g.members {
                    mask[i] = true;
                }
            }
        }
    }
    Ok(masks)
}

/// Copy of `model` with every dead parameter of `plan` set to zero.
pub fn hard_zero(model: &NetworkModel, plan: &CompactPlan) -> Result<NetworkModel> {
    check_plan(model, plan)?;
    let mut out = model.clone();
    for p in &plan.layers {
        let w = out.weights_mut(p.layer).expect("weighted layer");
        for (i, &d) in p.dead.iter().enumerate() {
            if d {
                w.set_param(i, 0.0);
            }
        }
    }
    Ok(out)
}

fn check_plan(model: &NetworkModel, plan: &CompactPlan) -> Result<()> {
    let weighted = model.weighted_layers();
    if weighted.len() != plan.layers.len() {
        return Err(Error::Structural {
            layer: String::new(),
            reason: format!("plan has {} layers, model {}", plan.layers.len(), weighted.len()),
        });
    }
    for (&i, p) in weighted.iter().zip(&plan.layers) {
        let layer = &model.layers()[i];
        let bad = |reason: &str| Error::Structural {
            layer: p.name.clone(),
            reason: reason.into(),
        };
        if p.layer != i || layer.name() != Some(p.name.as_str()) {
            return Err(bad("plan does not describe this layer"));
        }
        let w = weights_of(model, i);
        if p.dead.len() != w.param_len() {
            return Err(bad("dead mask length differs from parameter count"));
        }
        if p.removed {
            continue;
        }
        let n_cols = w.filter_len();
        let sorted = |v: &[usize], n: usize| v.windows(2).all(|x| x[0] < x[1]) && v.last().map_or(true, |&x| x < n);
        if p.rows.is_empty() || !sorted(&p.rows, w.n_filters()) {
            return Err(bad("surviving rows are empty or invalid"));
        }
        if p.cols.is_empty() || !sorted(&p.cols, n_cols) {
            return Err(bad("surviving columns are empty or invalid"));
        }
        if let Some(units) = &p.input_units {
            if units.is_empty() || !units.windows(2).all(|x| x[0] < x[1]) {
                return Err(bad("surviving input units are empty or invalid"));
            }
        }
    }
    Ok(())
}

/// Unit spaces between weighted layers, ignoring layers in `removed`.
struct Space {
    producer: Option<usize>,
    consumers: Vec<usize>,
    tied: bool,
}

fn unit_spaces(model: &NetworkModel, removed: &[bool]) -> (Vec<Space>, usize) {
    let mut spaces = vec![Space {
        producer: None,
        consumers: vec![],
        tied: false,
    }];
    let mut cur = 0;
    let mut stack = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        if removed[i] {
            continue;
        }
        match layer {
            Layer::Conv(_) | Layer::Fc(_) => {
                spaces[cur].consumers.push(i);
                spaces.push(Space {
                    producer: Some(i),
                    consumers: vec![],
                    tied: false,
                });
                cur = spaces.len() - 1;
            }
            Layer::ResidualBegin { .. } => {
                spaces[cur].tied = true;
                stack.push(cur);
            }
            Layer::ResidualEnd { .. } => {
                // The block output is the shortcut's space plus the inner
                // path; both stay whole.
                let short: usize = stack.pop().expect("validated model");
                spaces[cur].tied = true;
                spaces[short].tied = true;
                cur = short;
            }
            _ => {}
        }
    }
    (spaces, cur)
}

/// Value of a constant activation after the parameter-free layers between
/// `from` (exclusive) and `to` (exclusive).
fn pass_constant(model: &NetworkModel, removed: &[bool], from: usize, to: usize, v: f64) -> f64 {
    model.layers()[from + 1..to]
        .iter()
        .enumerate()
        .filter(|(k, _)| !removed[from + 1 + k])
        .fold(v, |v, (_, l)| match l {
            Layer::Relu => v.max(0.0),
            _ => v,
        })
}

/// Positions of the consumer's columns within its flattened incoming
/// activation.
fn column_positions(model: &NetworkModel, idx: usize) -> Vec<usize> {
    match &model.layers()[idx] {
        Layer::Fc(f) => f.input_index.clone().unwrap_or_else(|| (0..f.inputs()).collect()),
        Layer::Conv(c) => (0..c.weights.filter_len()).collect(),
        _ => unreachable!("weighted layer"),
    }
}

/// Incoming unit of each lowered column of layer `idx`.
fn column_units(model: &NetworkModel, idx: usize) -> Vec<usize> {
    let shape = model.shapes()[idx];
    match &model.layers()[idx] {
        Layer::Fc(_) => {
            let hw = shape[1] * shape[2];
            column_positions(model, idx).into_iter().map(|p| p / hw).collect()
        }
        Layer::Conv(c) => {
            let mk = c.weights.height() * c.weights.width();
            (0..c.weights.filter_len()).map(|f| f / mk).collect()
        }
        _ => unreachable!("weighted layer"),
    }
}

/// Columns taking part in the layer's product before compaction.
fn live_columns(model: &NetworkModel, idx: usize) -> Vec<bool> {
    let w = weights_of(model, idx);
    match &model.layers()[idx] {
        Layer::Conv(ConvLayer {
            live_fibers: Some(live),
            ..
        }) => {
            let mut v = vec![false; w.filter_len()];
            for &f in live {
                v[f] = true;
            }
            v
        }
        _ => vec![true; w.filter_len()],
    }
}

fn column_dead(dead: &[bool], w: &WeightTensor4D, col: usize) -> bool {
    let flen = w.filter_len();
    (0..w.n_filters()).all(|n| dead[n * flen + col])
}

fn row_dead(dead: &[bool], w: &WeightTensor4D, row: usize) -> bool {
    let flen = w.filter_len();
    dead[row * flen..(row + 1) * flen].iter().all(|&d| d)
}

/// Builds the plan for `model` under the groups of `cfg`.
///
/// A group is dead when its max-abs weight is strictly below
/// `cfg.zero_threshold`. Residual blocks whose final inner weighted layer is
/// entirely dead (weights and biases) are replaced by their shortcut.
pub fn detect_zero_groups(model: &NetworkModel, cfg: &SslConfig) -> Result<CompactPlan> {
    let masks = dead_masks(model, cfg)?;
    plan_from_masks(model, masks)
}

/// Builds a plan from explicit per-layer dead masks (weights then biases).
pub fn plan_from_masks(model: &NetworkModel, mut masks: HashMap<usize, Vec<bool>>) -> Result<CompactPlan> {
    let layers = model.layers();
    let weighted = model.weighted_layers();
    for &i in &weighted {
        let m = masks.entry(i).or_insert_with(|| vec![false; weights_of(model, i).param_len()]);
        if m.len() != weights_of(model, i).param_len() {
            return Err(Error::Structural {
                layer: layers[i].name().unwrap_or_default().into(),
                reason: "dead mask length differs from parameter count".into(),
            });
        }
    }
    let mut zeroed = model.clone();
    for (&i, m) in &masks {
        let w = zeroed.weights_mut(i).expect("weighted layer");
        for (p, &d) in m.iter().enumerate() {
            if d {
                w.set_param(p, 0.0);
            }
        }
    }

    // Depth: a block goes when its last inner weighted layer is entirely dead
    // and only parameter-free pointwise layers follow it inside the block.
    let mut removed = vec![false; layers.len()];
    let mut removed_blocks = Vec::new();
    for block in model.residual_blocks() {
        if removed[block.begin] {
            continue;
        }
        let mut tail = None;
        for j in (block.begin + 1..block.end).rev() {
            match &layers[j] {
                Layer::Relu | Layer::MaxPool { .. } => continue,
                Layer::Conv(_) | Layer::Fc(_) => tail = Some(j),
                _ => {}
            }
            break;
        }
        if let Some(t) = tail {
            if masks[&t].iter().all(|&d| d) {
                removed[block.begin..=block.end].iter_mut().for_each(|r| *r = true);
                removed_blocks.push(block.id);
            }
        }
    }

    for &i in &weighted {
        let w = weights_of(&zeroed, i);
        if !removed[i] && model.enclosing_block(i).is_none() && masks[&i][..w.weight_len()].iter().all(|&d| d) {
            return Err(Error::Structural {
                layer: layers[i].name().unwrap_or_default().into(),
                reason: "every weight is a zero group and no shortcut bridges the layer".into(),
            });
        }
    }

    let (spaces, output_space) = unit_spaces(model, &removed);
    let mut kept_rows: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut input_units: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut folds: HashMap<usize, Vec<Fold>> = HashMap::new();
    for (s, space) in spaces.iter().enumerate() {
        let (Some(p), [q]) = (space.producer, space.consumers.as_slice()) else {
            continue;
        };
        if space.tied || s == output_space {
            continue;
        }
        let q = *q;
        let wp = weights_of(&zeroed, p);
        let wq = weights_of(&zeroed, q);
        let units_of_col = column_units(&zeroed, q);
        let live = live_columns(&zeroed, q);
        let n_units = wp.n_filters();
        let mut q_dead = vec![true; n_units];
        for (col, &u) in units_of_col.iter().enumerate() {
            if live[col] && !column_dead(&masks[&q], wq, col) {
                q_dead[u] = false;
            }
        }
        let exact_fold = match &layers[q] {
            Layer::Fc(_) => true,
            Layer::Conv(c) => c.pad == (0, 0),
            _ => false,
        };
        let mut keep = Vec::new();
        let mut unit_folds = Vec::new();
        for u in 0..n_units {
            if q_dead[u] {
                continue;
            }
            if row_dead(&masks[&p], wp, u) {
                let value = pass_constant(&zeroed, &removed, p, q, wp.bias()[u]);
                if value == 0.0 || exact_fold {
                    if value != 0.0 {
                        unit_folds.push(Fold { unit: u, value });
                    }
                    continue;
                }
            }
            keep.push(u);
        }
        if keep.is_empty() {
            if model.enclosing_block(p).is_some() {
                continue;
            }
            return Err(Error::Structural {
                layer: layers[p].name().unwrap_or_default().into(),
                reason: "compaction would remove every filter".into(),
            });
        }
        if keep.len() < n_units {
            kept_rows.insert(p, keep.clone());
            input_units.insert(q, keep);
            folds.insert(q, unit_folds);
        }
    }

    let mut plans = Vec::with_capacity(weighted.len());
    for &i in &weighted {
        let w = weights_of(&zeroed, i);
        let dead = masks.remove(&i).expect("mask for every weighted layer");
        if removed[i] {
            plans.push(LayerPlan {
                layer: i,
                name: layers[i].name().unwrap_or_default().into(),
                dead,
                rows: vec![],
                cols: vec![],
                input_units: None,
                folds: vec![],
                removed: true,
            });
            continue;
        }
        let rows = kept_rows.remove(&i).unwrap_or_else(|| (0..w.n_filters()).collect());
        let units = input_units.remove(&i);
        let unit_alive = |u: usize| units.as_ref().map_or(true, |k| k.binary_search(&u).is_ok());
        let units_of_col = column_units(&zeroed, i);
        let live = live_columns(&zeroed, i);
        let mut cols: Vec<usize> = (0..w.filter_len())
            .filter(|&c| live[c] && unit_alive(units_of_col[c]) && !column_dead(&dead, w, c))
            .collect();
        if cols.is_empty() {
            // A fully dead layer bridged by a shortcut keeps its columns.
            cols = (0..w.filter_len()).filter(|&c| live[c] && unit_alive(units_of_col[c])).collect();
        }
        plans.push(LayerPlan {
            layer: i,
            name: layers[i].name().unwrap_or_default().into(),
            dead,
            rows,
            cols,
            input_units: units,
            folds: folds.remove(&i).unwrap_or_default(),
            removed: false,
        });
    }
    removed_blocks.sort_unstable();
    Ok(CompactPlan {
        layers: plans,
        removed_blocks,
    })
}

fn rank_in(sorted: &[usize], v: usize) -> Option<usize> {
    sorted.binary_search(&v).ok()
}

/// Rewrites `model` into the smaller network described by `plan`.
///
/// The result computes the same function as [`hard_zero`]`(model, plan)`:
/// removed filters' constant outputs are folded into the consumer's bias, and
/// dead groups that cannot be removed stay as masked zeros.
pub fn apply_plan(model: &NetworkModel, plan: &CompactPlan) -> Result<NetworkModel> {
    let zeroed = hard_zero(model, plan)?;
    let by_layer: HashMap<usize, &LayerPlan> = plan.layers.iter().map(|p| (p.layer, p)).collect();
    let mut removed = vec![false; zeroed.layers().len()];
    for b in zeroed.residual_blocks() {
        if plan.removed_blocks.contains(&b.id) {
            removed[b.begin..=b.end].iter_mut().for_each(|r| *r = true);
        }
    }
    for p in &plan.layers {
        if p.removed != removed[p.layer] {
            return Err(Error::Structural {
                layer: p.name.clone(),
                reason: "layer removal does not match the removed blocks".into(),
            });
        }
    }
    let mut out = Vec::with_capacity(zeroed.layers().len());
    let shapes = zeroed.shapes();
    for (i, layer) in zeroed.layers().iter().enumerate() {
        if removed[i] {
            continue;
        }
        let p = by_layer.get(&i);
        let new = match layer {
            Layer::Conv(c) => Layer::Conv(compact_conv(c, p.expect("plan for weighted layer"))?),
            Layer::Fc(f) => {
                let in_shape = shapes[i];
                Layer::Fc(compact_fc(f, p.expect("plan for weighted layer"), in_shape)?)
            }
            other => other.clone(),
        };
        out.push(new);
    }
    NetworkModel::new(zeroed.input_shape(), out).map_err(|e| Error::Structural {
        layer: String::new(),
        reason: format!("compacted network is inconsistent: {e}"),
    })
}

fn bias_with_folds(w: &WeightTensor4D, p: &LayerPlan, unit_sum: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    p.rows
        .iter()
        .map(|&n| w.bias()[n] + p.folds.iter().map(|f| f.value * unit_sum(n, f.unit)).sum::<f64>())
        .collect()
}

fn mask_or_none(mask: Vec<bool>) -> Option<Vec<bool>> {
    mask.iter().any(|&m| m).then_some(mask)
}

fn compact_conv(c: &ConvLayer, p: &LayerPlan) -> Result<ConvLayer> {
    let w = &c.weights;
    let [_, cin, mh, kw] = w.dims();
    let mk = mh * kw;
    let flen = w.filter_len();
    let channels: Vec<usize> = p.input_units.clone().unwrap_or_else(|| (0..cin).collect());
    let live = match &c.live_fibers {
        Some(l) => {
            let mut v = vec![false; flen];
            l.iter().for_each(|&f| v[f] = true);
            v
        }
        None => vec![true; flen],
    };
    let bias = bias_with_folds(w, p, |n, u| {
        (0..mk)
            .filter(|&s| live[u * mk + s])
            .map(|s| w.weights()[n * flen + u * mk + s])
            .sum()
    });
    let (nn, nc) = (p.rows.len(), channels.len());
    let mut values = Vec::with_capacity(nn * nc * mk);
    let mut mask = Vec::with_capacity(nn * nc * mk);
    for &n in &p.rows {
        for &ch in &channels {
            for s in 0..mk {
                let src = n * flen + ch * mk + s;
                values.push(w.weights()[src]);
                mask.push(p.dead[src]);
            }
        }
    }
    let mut fibers = Vec::with_capacity(p.cols.len());
    for &f in &p.cols {
        let rank = rank_in(&channels, f / mk).ok_or_else(|| Error::Structural {
            layer: c.name.clone(),
            reason: format!("surviving fiber {f} lies in a removed channel"),
        })?;
        fibers.push(rank * mk + f % mk);
    }
    // Absent fibers hold zeros so the stored tensor matches the product.
    for (j, m) in mask.iter_mut().enumerate() {
        let nf = j % (nc * mk);
        if fibers.binary_search(&nf).is_err() {
            *m = true;
            values[j] = 0.0;
        }
    }
    let live_fibers = (fibers.len() < nc * mk).then_some(fibers);
    Ok(ConvLayer {
        name: c.name.clone(),
        weights: WeightTensor4D::new(Tensor::new(vec![nn, nc, mh, kw], values)?, bias)?,
        stride: c.stride,
        pad: c.pad,
        live_fibers,
        zero_mask: mask_or_none(mask),
    })
}

fn compact_fc(f: &FcLayer, p: &LayerPlan, in_shape: [usize; 3]) -> Result<FcLayer> {
    let w = &f.weights;
    let n_in = w.n_channels();
    let hw = in_shape[1] * in_shape[2];
    let positions = f.input_index.clone().unwrap_or_else(|| (0..n_in).collect());
    let bias = bias_with_folds(w, p, |n, u| {
        (0..n_in)
            .filter(|&j| positions[j] / hw == u)
            .map(|j| w.weights()[n * n_in + j])
            .sum()
    });
    let new_pos = |pos: usize| -> Option<usize> {
        match &p.input_units {
            Some(units) => rank_in(units, pos / hw).map(|r| r * hw + pos % hw),
            None => Some(pos),
        }
    };
    let mut index = Vec::with_capacity(p.cols.len());
    for &j in &p.cols {
        index.push(new_pos(positions[j]).ok_or_else(|| Error::Structural {
            layer: f.name.clone(),
            reason: format!("surviving input {j} lies in a removed unit"),
        })?);
    }
    let incoming = p.input_units.as_ref().map_or(in_shape.iter().product(), |u| u.len() * hw);
    let identity = index.len() == incoming && index.iter().enumerate().all(|(a, &b)| a == b);
    let (nn, nk) = (p.rows.len(), p.cols.len());
    let mut values = Vec::with_capacity(nn * nk);
    let mut mask = Vec::with_capacity(nn * nk);
    for &n in &p.rows {
        for &j in &p.cols {
            values.push(w.weights()[n * n_in + j]);
            mask.push(p.dead[n * n_in + j]);
        }
    }
    Ok(FcLayer {
        name: f.name.clone(),
        weights: WeightTensor4D::new(Tensor::new(vec![nn, nk, 1, 1], values)?, bias)?,
        input_index: (!identity).then_some(index),
        zero_mask: mask_or_none(mask),
    })
}

/// Plan over fully-connected layers only: dead fan-in rows and fan-out
/// columns of every FC layer under `zero_threshold`.
pub fn neuron_plan(model: &NetworkModel, zero_threshold: f64) -> Result<CompactPlan> {
    let mut masks = HashMap::new();
    for i in model.weighted_layers() {
        let w = weights_of(model, i);
        let mut mask = vec![false; w.param_len()];
        if let Layer::Fc(_) = model.layers()[i] {
            let (n, c) = (w.n_filters(), w.n_channels());
            let group_dead = |idx: &mut dyn Iterator<Item = usize>| {
                let mx = idx.map(|k| w.weights()[k].abs()).fold(0.0, f64::max);
                is_dead(mx, zero_threshold)
            };
            for j in 0..n {
                if group_dead(&mut (j * c..(j + 1) * c)) {
                    mask[j * c..(j + 1) * c].iter_mut().for_each(|m| *m = true);
                }
            }
            for k in 0..c {
                if group_dead(&mut (0..n).map(|j| j * c + k)) {
                    (0..n).for_each(|j| mask[j * c + k] = true);
                }
            }
        }
        masks.insert(i, mask);
    }
    plan_from_masks(model, masks)
}

/// Removes dummy and bias-only neurons of fully-connected layers.
pub fn neuron_compact(model: &NetworkModel, plan: &CompactPlan) -> Result<NetworkModel> {
    for p in &plan.layers {
        if model.layers().get(p.layer).is_some_and(Layer::is_conv) && (p.n_dead() > 0 || p.input_units.is_some()) {
            return Err(Error::Structural {
                layer: p.name.clone(),
                reason: "neuron compaction applies to fully-connected layers only".into(),
            });
        }
    }
    apply_plan(model, plan)
}

/// Detects and applies in one go.
pub fn compact(model: &NetworkModel, cfg: &SslConfig) -> Result<(NetworkModel, CompactPlan)> {
    let plan = detect_zero_groups(model, cfg)?;
    let compacted = apply_plan(model, &plan)?;
    Ok((compacted, plan))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerFlops {
    pub name: String,
    pub before: u64,
    pub after: u64,
    /// `after` with masked (pinned-zero) weights also skipped.
    pub after_masked: u64,
}

impl LayerFlops {
    pub fn ratio(&self) -> f64 {
        ratio(self.after, self.before)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-sample floating-point operations, a multiply-add counting as two.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    pub total_before: u64,
    pub total_after: u64,
    pub total_after_masked: u64,
}

impl FlopReport {
    pub fn ratio(&self) -> f64 {
        ratio(self.total_after, self.total_before)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerFlops> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// `(flops, flops skipping masked weights)` of every weighted layer by name:
/// `2·N·live_columns·H_out·W_out` for conv layers, `2·out·in` for FC.
pub fn layer_flops(model: &NetworkModel) -> Vec<(String, u64, u64)> {
    let shapes = model.shapes();
    model
        .weighted_layers()
        .into_iter()
        .map(|i| {
            let layer = &model.layers()[i];
            let w = layer.weights().expect("weighted layer");
            let out = shapes[i + 1];
            let positions = (out[1] * out[2]) as u64;
            let (full, masked) = match layer {
                Layer::Conv(c) => {
                    let flen = w.filter_len();
                    let live: Vec<usize> = c.live_fibers.clone().unwrap_or_else(|| (0..flen).collect());
                    let macs = (w.n_filters() * live.len()) as u64;
                    let unmasked = match &c.zero_mask {
                        Some(m) => (0..w.n_filters())
                            .map(|n| live.iter().filter(|&&f| !m[n * flen + f]).count() as u64)
                            .sum(),
                        None => macs,
                    };
                    (2 * macs * positions, 2 * unmasked * positions)
                }
                _ => {
                    let macs = w.weight_len() as u64;
                    let unmasked = layer.zero_mask().map_or(macs, |m| m.iter().filter(|&&z| !z).count() as u64);
                    (2 * macs, 2 * unmasked)
                }
            };
            (layer.name().expect("weighted layer").to_string(), full, masked)
        })
        .collect()
}

/// FLOPs of `before` and `after`, matched by layer name. Layers missing from
/// `after` count as zero.
pub fn flop_report(before: &NetworkModel, after: &NetworkModel) -> FlopReport {
    let after_map: HashMap<String, (u64, u64)> = layer_flops(after)
        .into_iter()
        .map(|(n, a, m)| (n, (a, m)))
        .collect();
    let layers: Vec<LayerFlops> = layer_flops(before)
        .into_iter()
        .map(|(name, b, _)| {
            let (a, m) = after_map.get(&name).copied().unwrap_or((0, 0));
            LayerFlops {
                name,
                before: b,
                after: a,
                after_masked: m,
            }
        })
        .collect();
    FlopReport {
        total_before: layers.iter().map(|l| l.before).sum(),
        total_after: layers.iter().map(|l| l.after).sum(),
        total_after_masked: layers.iter().map(|l| l.after_masked).sum(),
        layers,
    }
}

/// Relative reconstruction error `‖X − X_d‖_F / ‖X‖_F` of the lowered weight
/// matrix (rows as samples) projected onto its top-`d` principal components,
/// for every `d` in `dims`.
///
/// Dimensions beyond `min(N, C·M·K)` are clamped with a warning.
pub fn pca_rank_analysis(w: &WeightTensor4D, dims: &[usize]) -> Vec<(usize, f64)> {
    let (n, d) = (w.n_filters(), w.filter_len());
    let x = DMatrix::from_row_slice(n, d, w.weights());
    let total: f64 = x.iter().map(|v| v * v).sum();
    let mean = x.row_mean();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &mean;
    }
    // Singular values of Xc rather than Gram eigenvalues: the tail stays
    // accurate near full rank, where Gram round-off would surface as √ε.
    let s = xc.singular_values();
    // Values under the usual numerical-rank cutoff are round-off; past the
    // rank the residual is exactly zero, not noise.
    let cutoff = s.max() * n.max(d) as f64 * f64::EPSILON;
    let mut sv: Vec<f64> = s.iter().filter(|&&v| v > cutoff).map(|v| v * v).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    let max_dim = n.min(d);
    let mut out = Vec::with_capacity(dims.len());
    for &dim in dims {
        let k = if dim > max_dim {
            warn!("pca dimension {dim} exceeds rank bound {max_dim}; clamped");
            max_dim
        } else {
            dim
        };
        let residual: f64 = sv.iter().skip(k).sum();
        let err = if total > 0.0 { (residual / total).sqrt() } else { 0.0 };
        out.push((dim, err));
    }
    out
}

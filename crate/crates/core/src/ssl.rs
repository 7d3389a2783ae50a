//! Group definitions for the structured sparsity schemes, group-Lasso values
//! and stabilized gradients, and the full regularized objective.
//!
//! Group members are flat indices into a layer's parameter array (weights
//! followed by biases, see [`WeightTensor4D::param`]). Only depth-wise groups
//! reach into the biases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, Layer, NetworkModel, WeightTensor4D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    FilterWise,
    ChannelWise,
    ShapeWise,
    DepthWise,
    Filter2DWise,
    RowColumn,
    /// One group per input unit of a fully-connected layer: its fan-out
    /// column `W[:, i]`.
    NeuronWiseIn,
    /// One group per output unit of a fully-connected layer: its fan-in row
    /// `W[j, :]`.
    NeuronWiseOut,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 8] = [
        SchemeKind::FilterWise,
        SchemeKind::ChannelWise,
        SchemeKind::ShapeWise,
        SchemeKind::DepthWise,
        SchemeKind::Filter2DWise,
        SchemeKind::RowColumn,
        SchemeKind::NeuronWiseIn,
        SchemeKind::NeuronWiseOut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::FilterWise => "filter_wise",
            SchemeKind::ChannelWise => "channel_wise",
            SchemeKind::ShapeWise => "shape_wise",
            SchemeKind::DepthWise => "depth_wise",
            SchemeKind::Filter2DWise => "filter2d_wise",
            SchemeKind::RowColumn => "row_column",
            SchemeKind::NeuronWiseIn => "neuron_wise_in",
            SchemeKind::NeuronWiseOut => "neuron_wise_out",
        }
    }
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which weighted layers a scheme applies to.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    /// Conv layers for the convolutional schemes, every layer inside a
    /// residual block for depth-wise, FC layers for `NeuronWiseIn`, and FC
    /// layers except the classifier for `NeuronWiseOut`.
    #[default]
    Default,
    All,
    Conv,
    Fc,
    Named(Vec<String>),
}

/// What one group covers, and hence what compaction may remove when it dies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRole {
    /// `W[n, :, :, :]`; for FC layers, the fan-in of output unit `n`.
    Filter,
    /// `W[:, c, :, :]`; for FC layers, the fan-out of input unit `c`.
    Channel,
    /// `W[:, c, m, k]`, indexed by its lowered column `(c·M + m)·K + k`.
    Fiber,
    /// `W[n, c, :, :]`, indexed by `n·C + c`.
    Kernel2D,
    /// Every weight and bias of the layer.
    Layer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupingScheme {
    pub kind: SchemeKind,
    #[serde(default)]
    pub layers: LayerSelector,
    /// `λ_g`.
    pub strength: f64,
}

impl GroupingScheme {
    pub fn new(kind: SchemeKind, strength: f64) -> Self {
        Self {
            kind,
            layers: LayerSelector::Default,
            strength,
        }
    }

    pub fn with_layers(mut self, layers: LayerSelector) -> Self {
        self.layers = layers;
        self
    }
}

/// `w^(g)`: the members of one group within one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupIndexSet {
    /// Index into `model.layers()`.
    pub layer: usize,
    pub role: GroupRole,
    /// Filter, channel, fiber, kernel or 0 for whole-layer groups.
    pub index: usize,
    pub members: Vec<usize>,
}

impl GroupIndexSet {
    pub fn size(&self) -> usize {
        self.members.len()
    }
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_threshold() -> f64 {
    1e-4
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    pub schemes: Vec<GroupingScheme>,
    /// Floor on the group norm in the gradient `w / max(‖w‖, ε)`.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// A group whose max-abs weight is below this is treated as zero.
    #[serde(default = "default_threshold")]
    pub zero_threshold: f64,
    /// Requesting either filter-wise or channel-wise groups enables the other
    /// on the same layers with the same strength.
    #[serde(default = "default_true")]
    pub couple_filter_channel: bool,
}

impl SslConfig {
    pub fn new(schemes: Vec<GroupingScheme>) -> Self {
        Self {
            schemes,
            epsilon: default_epsilon(),
            zero_threshold: default_threshold(),
            couple_filter_channel: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::Config("ssl needs at least one scheme".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("ssl epsilon must be positive".into()));
        }
        if !(self.zero_threshold >= 0.0) {
            return Err(Error::Config("zero_threshold must be non-negative".into()));
        }
        if let Some(s) = self.schemes.iter().find(|s| !(s.strength >= 0.0 && s.strength.is_finite())) {
            return Err(Error::Config(format!("{}: strength must be non-negative", s.kind)));
        }
        Ok(())
    }

    /// The configured schemes plus any added by filter/channel coupling.
    pub fn effective_schemes(&self) -> Vec<GroupingScheme> {
        let mut out = self.schemes.clone();
        if !self.couple_filter_channel {
            return out;
        }
        for s in &self.schemes {
            let partner = match s.kind {
                SchemeKind::FilterWise => SchemeKind::ChannelWise,
                SchemeKind::ChannelWise => SchemeKind::FilterWise,
                _ => continue,
            };
            if !out.iter().any(|o| o.kind == partner && o.layers == s.layers) {
                out.push(GroupingScheme {
                    kind: partner,
                    layers: s.layers.clone(),
                    strength: s.strength,
                });
            }
        }
        out
    }
}

fn selected_layers(kind: SchemeKind, selector: &LayerSelector, model: &NetworkModel) -> Result<Vec<usize>> {
    let layers = model.layers();
    let weighted = model.weighted_layers();
    let in_block = |i: usize| model.enclosing_block(i).is_some();
    let picked: Vec<usize> = match selector {
        LayerSelector::Default => match kind {
            SchemeKind::DepthWise => weighted.iter().copied().filter(|&i| in_block(i)).collect(),
            SchemeKind::NeuronWiseIn => weighted.iter().copied().filter(|&i| !layers[i].is_conv()).collect(),
            SchemeKind::NeuronWiseOut => {
                let last = weighted.last().copied();
                weighted
                    .iter()
                    .copied()
                    .filter(|&i| !layers[i].is_conv() && Some(i) != last)
                    .collect()
            }
            _ => weighted.iter().copied().filter(|&i| layers[i].is_conv()).collect(),
        },
        LayerSelector::All => weighted.clone(),
        LayerSelector::Conv => weighted.iter().copied().filter(|&i| layers[i].is_conv()).collect(),
        LayerSelector::Fc => weighted.iter().copied().filter(|&i| !layers[i].is_conv()).collect(),
        LayerSelector::Named(names) => {
            let mut v = Vec::with_capacity(names.len());
            for name in names {
                match model.find_layer(name) {
                    Some(i) => v.push(i),
                    None => return Err(Error::Config(format!("{kind}: no layer named {name}"))),
                }
            }
            v.sort_unstable();
            v.dedup();
            v
        }
    };
    if picked.is_empty() {
        return Err(Error::Config(format!("{kind}: layer selector {selector:?} matches no layer")));
    }
    if kind == SchemeKind::DepthWise {
        if model.residual_blocks().is_empty() {
            return Err(Error::Config(
                "depth_wise needs residual blocks; zeroing a plain layer cuts the network".into(),
            ));
        }
        let first_conv = weighted.iter().copied().find(|&i| layers[i].is_conv());
        for &i in &picked {
            let name = layers[i].name().unwrap_or("?");
            if Some(i) == first_conv {
                return Err(Error::Config(format!("depth_wise may not select the first conv layer {name}")));
            }
            if !in_block(i) {
                return Err(Error::Config(format!("depth_wise layer {name} is not inside a residual block")));
            }
        }
    }
    if matches!(kind, SchemeKind::NeuronWiseIn | SchemeKind::NeuronWiseOut) {
        if let Some(&i) = picked.iter().find(|&&i| layers[i].is_conv()) {
            return Err(Error::Config(format!(
                "{kind} applies to fully-connected layers, {} is a conv layer",
                layers[i].name().unwrap_or("?")
            )));
        }
    }
    Ok(picked)
}

fn layer_groups(kind: SchemeKind, layer: usize, w: &WeightTensor4D) -> Vec<GroupIndexSet> {
    let [n, c, m, k] = w.dims();
    let mk = m * k;
    let flen = c * mk;
    let group = |role, index, members| GroupIndexSet {
        layer,
        role,
        index,
        members,
    };
    let filters = || (0..n).map(|f| group(GroupRole::Filter, f, (f * flen..(f + 1) * flen).collect()));
    let channels = || {
        (0..c).map(move |ch| {
            let members = (0..n)
                .flat_map(|f| (0..mk).map(move |s| f * flen + ch * mk + s))
                .collect();
            group(GroupRole::Channel, ch, members)
        })
    };
    let fibers = || (0..flen).map(|col| group(GroupRole::Fiber, col, (0..n).map(|f| f * flen + col).collect()));
    match kind {
        SchemeKind::FilterWise | SchemeKind::NeuronWiseOut => filters().collect(),
        SchemeKind::ChannelWise | SchemeKind::NeuronWiseIn => channels().collect(),
        SchemeKind::ShapeWise => fibers().collect(),
        SchemeKind::RowColumn => filters().chain(fibers()).collect(),
        SchemeKind::DepthWise => vec![group(GroupRole::Layer, 0, (0..w.param_len()).collect())],
        SchemeKind::Filter2DWise => (0..n * c)
            .map(|nc| group(GroupRole::Kernel2D, nc, (nc * mk..(nc + 1) * mk).collect()))
            .collect(),
    }
}

/// Groups of `scheme` over the layers its selector picks.
pub fn enumerate_groups(scheme: &GroupingScheme, model: &NetworkModel) -> Result<Vec<GroupIndexSet>> {
    let layers = selected_layers(scheme.kind, &scheme.layers, model)?;
    Ok(layers
        .into_iter()
        .flat_map(|i| layer_groups(scheme.kind, i, model.layers()[i].weights().expect("weighted layer")))
        .collect())
}

/// `‖w^(g)‖₂` over the members of one group.
pub fn group_norm(params: &WeightTensor4D, members: &[usize]) -> f64 {
    members.iter().map(|&i| params.param(i).powi(2)).sum::<f64>().sqrt()
}

/// Largest absolute member of one group.
pub fn group_max_abs(params: &WeightTensor4D, members: &[usize]) -> f64 {
    members.iter().map(|&i| params.param(i).abs()).fold(0.0, f64::max)
}

/// A group is dead when its max-abs weight is strictly below `threshold`, or
/// when it is exactly zero. A group sitting at the threshold is kept.
pub fn is_dead(max_abs: f64, threshold: f64) -> bool {
    max_abs < threshold || max_abs == 0.0
}

/// `R_g(w) = Σ_g ‖w^(g)‖₂`.
pub fn group_lasso_value(model: &NetworkModel, groups: &[GroupIndexSet]) -> f64 {
    groups
        .iter()
        .map(|g| group_norm(model.layers()[g.layer].weights().expect("weighted layer"), &g.members))
        .sum()
}

/// Adds `scale · w_i / max(‖w^(g)‖, ε)` for every member `i` of every group.
pub fn accumulate_group_lasso_grad(
    model: &NetworkModel,
    groups: &[GroupIndexSet],
    epsilon: f64,
    scale: f64,
    out: &mut Gradients,
) {
    for g in groups {
        let w = model.layers()[g.layer].weights().expect("weighted layer");
        let factor = scale / group_norm(w, &g.members).max(epsilon);
        let grad = out.layer_mut(g.layer).expect("gradient slot for weighted layer");
        for &i in &g.members {
            grad.add(i, factor * w.param(i));
        }
    }
}

/// Stabilized gradient of `R_g`: member `i` of group `g` receives
/// `w_i / max(‖w^(g)‖, ε)`; overlapping groups add.
pub fn group_lasso_grad(model: &NetworkModel, groups: &[GroupIndexSet], epsilon: f64) -> Gradients {
    let mut out = Gradients::zeros_like(model);
    accumulate_group_lasso_grad(model, groups, epsilon, 1.0, &mut out);
    out
}

/// Groups of every effective scheme, enumerated once for a fixed topology.
#[derive(Clone, Debug)]
pub struct SslRegularizer {
    terms: Vec<(GroupingScheme, Vec<GroupIndexSet>)>,
    epsilon: f64,
}

impl SslRegularizer {
    pub fn new(cfg: &SslConfig, model: &NetworkModel) -> Result<Self> {
        cfg.validate()?;
        let terms = cfg
            .effective_schemes()
            .into_iter()
            .map(|s| enumerate_groups(&s, model).map(|g| (s, g)))
            .collect::<Result<_>>()?;
        Ok(Self {
            terms,
            epsilon: cfg.epsilon,
        })
    }

    pub fn terms(&self) -> &[(GroupingScheme, Vec<GroupIndexSet>)] {
        &self.terms
    }

    /// `Σ_schemes λ_g·R_g(W)`.
    pub fn penalty(&self, model: &NetworkModel) -> f64 {
        self.terms
            .iter()
            .map(|(s, g)| s.strength * group_lasso_value(model, g))
            .sum()
    }

    pub fn gradient(&self, model: &NetworkModel) -> Gradients {
        let mut out = Gradients::zeros_like(model);
        for (s, g) in &self.terms {
            if s.strength > 0.0 {
                accumulate_group_lasso_grad(model, g, self.epsilon, s.strength, &mut out);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveTerm {
    pub label: String,
    pub value: f64,
}

/// `E(W) = E_D + λ·½‖W‖² + Σ λ_g·R_g(W)` with each addend listed.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub total: f64,
    pub terms: Vec<ObjectiveTerm>,
}

pub fn ssl_objective(model: &NetworkModel, data_loss: f64, cfg: Option<&SslConfig>, weight_decay: f64) -> Result<Objective> {
    let mut terms = vec![
        ObjectiveTerm {
            label: "data".into(),
            value: data_loss,
        },
        ObjectiveTerm {
            label: "weight_decay".into(),
            value: weight_decay * 0.5 * model.weight_sq_norm(),
        },
    ];
    if let Some(cfg) = cfg {
        let reg = SslRegularizer::new(cfg, model)?;
        for (s, groups) in reg.terms() {
            terms.push(ObjectiveTerm {
                label: s.kind.to_string(),
                value: s.strength * group_lasso_value(model, groups),
            });
        }
    }
    Ok(Objective {
        total: terms.iter().map(|t| t.value).sum(),
        terms,
    })
}

/// Zero-group counts for one (scheme, layer, role).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityEntry {
    pub scheme: SchemeKind,
    pub layer: String,
    pub role: GroupRole,
    pub groups: usize,
    pub zero_groups: usize,
}

impl SparsityEntry {
    pub fn fraction(&self) -> f64 {
        if self.groups == 0 {
            0.0
        } else {
            self.zero_groups as f64 / self.groups as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub entries: Vec<SparsityEntry>,
}

impl SparsityReport {
    pub fn find(&self, scheme: SchemeKind, layer: &str, role: GroupRole) -> Option<&SparsityEntry> {
        self.entries
            .iter()
            .find(|e| e.scheme == scheme && e.layer == layer && e.role == role)
    }

    /// Group-count weighted sparsity of one scheme over all its layers.
    pub fn scheme_fraction(&self, scheme: SchemeKind) -> Option<f64> {
        let (g, z) = self
            .entries
            .iter()
            .filter(|e| e.scheme == scheme)
            .fold((0, 0), |(g, z), e| (g + e.groups, z + e.zero_groups));
        (g > 0).then(|| z as f64 / g as f64)
    }
}

/// Per scheme, layer and role: how many groups are dead under
/// `cfg.zero_threshold`. Row-column schemes report rows (filters) and columns
/// (fibers) as separate entries.
pub fn sparsity_stats(model: &NetworkModel, cfg: &SslConfig) -> Result<SparsityReport> {
    let mut entries: Vec<SparsityEntry> = Vec::new();
    for scheme in cfg.effective_schemes() {
        for g in enumerate_groups(&scheme, model)? {
            let layer = &model.layers()[g.layer];
            let dead = is_dead(
                group_max_abs(layer.weights().expect("weighted layer"), &g.members),
                cfg.zero_threshold,
            );
            let name = layer.name().expect("weighted layer");
            match entries
                .iter_mut()
                .find(|e| e.scheme == scheme.kind && e.layer == name && e.role == g.role)
            {
                Some(e) => {
                    e.groups += 1;
                    e.zero_groups += usize::from(dead);
                }
                None => entries.push(SparsityEntry {
                    scheme: scheme.kind,
                    layer: name.to_string(),
                    role: g.role,
                    groups: 1,
                    zero_groups: usize::from(dead),
                }),
            }
        }
    }
    Ok(SparsityReport { entries })
}

/// Max-abs value of every group of every effective scheme, for inspecting
/// how cleanly trained groups separate into zero and non-zero.
pub fn group_magnitudes(model: &NetworkModel, cfg: &SslConfig) -> Result<Vec<(SchemeKind, String, f64)>> {
    let mut out = Vec::new();
    for scheme in cfg.effective_schemes() {
        for g in enumerate_groups(&scheme, model)? {
            let layer = &model.layers()[g.layer];
            out.push((
                scheme.kind,
                layer.name().expect("weighted layer").to_string(),
                group_max_abs(layer.weights().expect("weighted layer"), &g.members),
            ));
        }
    }
    Ok(out)
}

/// Whether layer `idx` is a conv layer; handy for selectors built at runtime.
pub fn is_conv_layer(model: &NetworkModel, idx: usize) -> bool {
    matches!(model.layers().get(idx), Some(Layer::Conv(_)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{presets, LayerSpec};
    use proptest::prelude::*;

    fn lenet() -> NetworkModel {
        let (shape, specs) = presets::lenet();
        NetworkModel::from_specs(shape, &specs, 7).unwrap()
    }

    fn single_fc(weights: &[f64], outputs: usize) -> NetworkModel {
        let inputs = weights.len() / outputs;
        let specs = vec![LayerSpec::Fc {
            name: "fc".into(),
            outputs,
        }];
        let mut m = NetworkModel::from_specs([inputs, 1, 1], &specs, 0).unwrap();
        m.weights_mut(0).unwrap().weights_mut().copy_from_slice(weights);
        m
    }

    fn tiny_conv(seed: u64) -> NetworkModel {
        let specs = vec![
            LayerSpec::Conv {
                name: "c1".into(),
                filters: 3,
                kernel: [2, 2],
                stride: [1, 1],
                pad: [0, 0],
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                name: "c2".into(),
                filters: 2,
                kernel: [2, 2],
                stride: [1, 1],
                pad: [0, 0],
            },
            LayerSpec::Fc {
                name: "fc".into(),
                outputs: 3,
            },
        ];
        NetworkModel::from_specs([2, 4, 4], &specs, seed).unwrap()
    }

    fn conv1_only(kind: SchemeKind) -> GroupingScheme {
        GroupingScheme::new(kind, 1.0).with_layers(LayerSelector::Named(vec!["conv1".into()]))
    }

    #[test]
    fn filter_wise_on_lenet_conv1() {
        let groups = enumerate_groups(&conv1_only(SchemeKind::FilterWise), &lenet()).unwrap();
        assert_eq!(groups.len(), 20);
        assert!(groups.iter().all(|g| g.size() == 25));
    }

    #[test]
    fn shape_wise_on_lenet_conv1() {
        let groups = enumerate_groups(&conv1_only(SchemeKind::ShapeWise), &lenet()).unwrap();
        assert_eq!(groups.len(), 25);
        assert!(groups.iter().all(|g| g.size() == 20));
    }

    #[test]
    fn filter2d_count() {
        let specs = vec![
            LayerSpec::Conv {
                name: "c".into(),
                filters: 2,
                kernel: [5, 5],
                stride: [1, 1],
                pad: [0, 0],
            },
            LayerSpec::Fc {
                name: "fc".into(),
                outputs: 2,
            },
        ];
        let m = NetworkModel::from_specs([3, 5, 5], &specs, 0).unwrap();
        let g = enumerate_groups(&GroupingScheme::new(SchemeKind::Filter2DWise, 1.0), &m).unwrap();
        assert_eq!(g.len(), 6);
        assert!(g.iter().all(|g| g.size() == 25));
    }

    #[test]
    fn selector_errors() {
        let m = lenet();
        let named = GroupingScheme::new(SchemeKind::FilterWise, 1.0).with_layers(LayerSelector::Named(vec!["nope".into()]));
        assert!(matches!(enumerate_groups(&named, &m), Err(Error::Config(_))));
        let depth = GroupingScheme::new(SchemeKind::DepthWise, 1.0);
        assert!(matches!(enumerate_groups(&depth, &m), Err(Error::Config(_))));
        let neuron = GroupingScheme::new(SchemeKind::NeuronWiseIn, 1.0).with_layers(LayerSelector::Conv);
        assert!(matches!(enumerate_groups(&neuron, &m), Err(Error::Config(_))));
    }

    #[test]
    fn depth_wise_on_resnet() {
        let (shape, specs) = presets::mini_resnet();
        let m = NetworkModel::from_specs(shape, &specs, 1).unwrap();
        let g = enumerate_groups(&GroupingScheme::new(SchemeKind::DepthWise, 1.0), &m).unwrap();
        assert_eq!(g.len(), 6);
        for grp in &g {
            assert_eq!(grp.size(), m.layers()[grp.layer].weights().unwrap().param_len());
        }
        let first = GroupingScheme::new(SchemeKind::DepthWise, 1.0).with_layers(LayerSelector::Named(vec!["conv0".into()]));
        assert!(enumerate_groups(&first, &m).is_err());
    }

    #[test]
    fn neuron_default_selection() {
        let (shape, specs) = presets::mlp();
        let m = NetworkModel::from_specs(shape, &specs, 1).unwrap();
        let input = enumerate_groups(&GroupingScheme::new(SchemeKind::NeuronWiseIn, 1.0), &m).unwrap();
        assert_eq!(input.len(), 784 + 500 + 300);
        assert!(input[..784].iter().all(|g| g.size() == 500));
        let output = enumerate_groups(&GroupingScheme::new(SchemeKind::NeuronWiseOut, 1.0), &m).unwrap();
        assert_eq!(output.len(), 500 + 300);
    }

    #[test]
    fn partition_property_every_scheme() {
        let (shape, specs) = presets::mini_resnet();
        let resnet = NetworkModel::from_specs(shape, &specs, 1).unwrap();
        let conv = tiny_conv(3);
        for kind in SchemeKind::ALL {
            let model = if kind == SchemeKind::DepthWise { &resnet } else { &conv };
            let scheme = GroupingScheme::new(kind, 1.0).with_layers(match kind {
                SchemeKind::DepthWise => LayerSelector::Default,
                SchemeKind::NeuronWiseIn | SchemeKind::NeuronWiseOut => LayerSelector::Fc,
                _ => LayerSelector::All,
            });
            let groups = enumerate_groups(&scheme, model).unwrap();
            let layer_ids: std::collections::BTreeSet<usize> = groups.iter().map(|g| g.layer).collect();
            for l in layer_ids {
                let w = model.layers()[l].weights().unwrap();
                let parts: Vec<&GroupIndexSet> = groups.iter().filter(|g| g.layer == l).collect();
                let roles: std::collections::BTreeSet<_> = parts.iter().map(|g| g.role as u8).collect();
                for role in roles {
                    let mut seen = vec![0usize; w.param_len()];
                    for g in parts.iter().filter(|g| g.role as u8 == role) {
                        for &i in &g.members {
                            seen[i] += 1;
                        }
                    }
                    let weights_once = seen[..w.weight_len()].iter().all(|&c| c == 1);
                    assert!(weights_once, "{kind} layer {l} role {role}");
                }
            }
        }
    }

    #[test]
    fn lasso_value_cases() {
        assert_eq!(group_lasso_value(&single_fc(&[3.0, 4.0], 1), &groups_of(SchemeKind::FilterWise, &single_fc(&[3.0, 4.0], 1))), 5.0);
        let z = single_fc(&[0.0; 6], 2);
        assert_eq!(group_lasso_value(&z, &groups_of(SchemeKind::FilterWise, &z)), 0.0);
    }

    fn groups_of(kind: SchemeKind, m: &NetworkModel) -> Vec<GroupIndexSet> {
        enumerate_groups(&GroupingScheme::new(kind, 1.0).with_layers(LayerSelector::All), m).unwrap()
    }

    #[test]
    fn lasso_value_matches_flat_oracle() {
        let m = lenet();
        let w = m.weights(m.find_layer("conv2").unwrap()).unwrap();
        let groups = enumerate_groups(&conv1_only(SchemeKind::FilterWise).with_layers(LayerSelector::Named(vec!["conv2".into()])), &m).unwrap();
        let flat = w.weights();
        let per = flat.len() / 50;
        let oracle: f64 = (0..50)
            .map(|n| flat[n * per..(n + 1) * per].iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum();
        assert!((group_lasso_value(&m, &groups) - oracle).abs() <= 1e-12 * oracle);
    }

    #[test]
    fn lasso_grad_cases() {
        let m = single_fc(&[3.0, 4.0], 1);
        let g = group_lasso_grad(&m, &groups_of(SchemeKind::FilterWise, &m), 1e-8);
        let w = &g.layer(0).unwrap().weights;
        assert!((w[0] - 0.6).abs() < 1e-15 && (w[1] - 0.8).abs() < 1e-15);
        let z = single_fc(&[0.0, 0.0], 1);
        let g = group_lasso_grad(&z, &groups_of(SchemeKind::FilterWise, &z), 1e-8);
        assert_eq!(g.layer(0).unwrap().weights, vec![0.0, 0.0]);
    }

    fn fd_check(model: &NetworkModel, groups: &[GroupIndexSet], eps: f64) -> f64 {
        let grad = group_lasso_grad(model, groups, eps);
        let mut worst: f64 = 0.0;
        let h = 1e-6;
        for l in model.weighted_layers() {
            let n = model.weights(l).unwrap().param_len();
            for i in 0..n {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let base = model.weights(l).unwrap().param(i);
                plus.weights_mut(l).unwrap().set_param(i, base + h);
                minus.weights_mut(l).unwrap().set_param(i, base - h);
                let fd = (group_lasso_value(&plus, groups) - group_lasso_value(&minus, groups)) / (2.0 * h);
                let an = grad.layer(l).unwrap().get(i);
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn lasso_grad_matches_finite_differences() {
        let m = tiny_conv(11);
        for kind in [SchemeKind::FilterWise, SchemeKind::ChannelWise, SchemeKind::ShapeWise, SchemeKind::Filter2DWise, SchemeKind::RowColumn] {
            let g = groups_of(kind, &m);
            assert!(fd_check(&m, &g, 1e-8) < 1e-5, "{kind}");
        }
    }

    #[test]
    fn stabilized_grad_converges_as_epsilon_shrinks() {
        // Group norms near 1e-3 so the floor bites for larger epsilon.
        let m = single_fc(&[6e-4, 8e-4, 3.0, 4.0], 2);
        let groups = groups_of(SchemeKind::FilterWise, &m);
        let errs: Vec<f64> = [1e-2, 1e-4, 1e-6].iter().map(|&e| fd_check(&m, &groups, e)).collect();
        assert!(errs[0] > errs[1] && errs[1] >= errs[2], "{errs:?}");
        assert!(errs[2] < 1e-5);
    }

    #[test]
    fn objective_terms() {
        let m = tiny_conv(5);
        let zero = SslConfig::new(vec![GroupingScheme::new(SchemeKind::FilterWise, 0.0)]);
        let obj = ssl_objective(&m, 1.25, Some(&zero), 0.0).unwrap();
        assert_eq!(obj.total, 1.25);

        // Literal double sum over filters and channels of conv layers.
        let (ln, lc, wd) = (0.03, 0.02, 1e-3);
        let mut cfg = SslConfig::new(vec![
            GroupingScheme::new(SchemeKind::FilterWise, ln),
            GroupingScheme::new(SchemeKind::ChannelWise, lc),
        ]);
        cfg.couple_filter_channel = false;
        let mut literal = 0.7;
        for l in m.weighted_layers() {
            let w = m.weights(l).unwrap();
            literal += wd * 0.5 * w.weights().iter().map(|v| v * v).sum::<f64>();
            if !m.layers()[l].is_conv() {
                continue;
            }
            let [n, c, mm, k] = w.dims();
            let t = w.values();
            for f in 0..n {
                let mut s = 0.0;
                for ch in 0..c {
                    for y in 0..mm {
                        for x in 0..k {
                            s += t.at(&[f, ch, y, x]).powi(2);
                        }
                    }
                }
                literal += ln * s.sqrt();
            }
            for ch in 0..c {
                let mut s = 0.0;
                for f in 0..n {
                    for y in 0..mm {
                        for x in 0..k {
                            s += t.at(&[f, ch, y, x]).powi(2);
                        }
                    }
                }
                literal += lc * s.sqrt();
            }
        }
        let obj = ssl_objective(&m, 0.7, Some(&cfg), wd).unwrap();
        assert!((obj.total - literal).abs() < 1e-10);
        assert_eq!(obj.terms.len(), 4);
    }

    #[test]
    fn shape_wise_objective_matches_literal() {
        let m = tiny_conv(9);
        let ls = 0.05;
        let cfg = SslConfig::new(vec![GroupingScheme::new(SchemeKind::ShapeWise, ls)]);
        let mut literal = 0.0;
        for l in m.weighted_layers().into_iter().filter(|&l| m.layers()[l].is_conv()) {
            let t = m.weights(l).unwrap().values();
            let [n, c, mm, k] = m.weights(l).unwrap().dims();
            for ch in 0..c {
                for y in 0..mm {
                    for x in 0..k {
                        literal += ls * (0..n).map(|f| t.at(&[f, ch, y, x]).powi(2)).sum::<f64>().sqrt();
                    }
                }
            }
        }
        let obj = ssl_objective(&m, 0.0, Some(&cfg), 0.0).unwrap();
        assert!((obj.total - literal).abs() < 1e-10);
    }

    #[test]
    fn coupling_adds_partner() {
        let cfg = SslConfig::new(vec![GroupingScheme::new(SchemeKind::FilterWise, 0.1)]);
        let eff = cfg.effective_schemes();
        assert_eq!(eff.len(), 2);
        assert_eq!(eff[1].kind, SchemeKind::ChannelWise);
        let mut off = cfg.clone();
        off.couple_filter_channel = false;
        assert_eq!(off.effective_schemes().len(), 1);
    }

    #[test]
    fn stats_cases() {
        let mut m = lenet();
        let cfg = SslConfig {
            zero_threshold: 0.0,
            ..SslConfig::new(vec![conv1_only(SchemeKind::FilterWise)])
        };
        let r = sparsity_stats(&m, &cfg).unwrap();
        assert!(r.entries.iter().all(|e| e.zero_groups == 0));

        let c1 = m.find_layer("conv1").unwrap();
        let w = m.weights_mut(c1).unwrap();
        for v in &mut w.weights_mut()[..10 * 25] {
            *v = 0.0;
        }
        let r = sparsity_stats(&m, &cfg).unwrap();
        assert_eq!(r.find(SchemeKind::FilterWise, "conv1", GroupRole::Filter).unwrap().fraction(), 0.5);
    }

    #[test]
    fn row_column_reports_rows_and_columns() {
        let mut m = tiny_conv(2);
        let c1 = m.find_layer("c1").unwrap();
        let w = m.weights_mut(c1).unwrap();
        // Filter 0 (8 weights) and fiber 1 across all filters.
        for i in 0..8 {
            w.weights_mut()[i] = 0.0;
        }
        for f in 0..3 {
            w.weights_mut()[f * 8 + 1] = 0.0;
        }
        let cfg = SslConfig::new(vec![GroupingScheme::new(SchemeKind::RowColumn, 1.0)
            .with_layers(LayerSelector::Named(vec!["c1".into()]))]);
        let r = sparsity_stats(&m, &cfg).unwrap();
        let rows = r.find(SchemeKind::RowColumn, "c1", GroupRole::Filter).unwrap();
        let cols = r.find(SchemeKind::RowColumn, "c1", GroupRole::Fiber).unwrap();
        assert_eq!((rows.groups, rows.zero_groups), (3, 1));
        assert_eq!((cols.groups, cols.zero_groups), (8, 1));
    }

    #[test]
    fn tie_at_threshold_is_kept() {
        assert!(!is_dead(1e-4, 1e-4));
        assert!(is_dead(0.99e-4, 1e-4));
        assert!(is_dead(0.0, 0.0));
        assert!(!is_dead(1e-300, 0.0));
    }

    fn random_weights() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, 12)
    }

    proptest! {
        #[test]
        fn stats_agree_with_rescan(values in prop::collection::vec(prop_oneof![Just(0.0), -1.0f64..1.0], 24), thr in 0.0f64..0.5) {
            // 4 outputs × 6 inputs.
            let m = single_fc(&values, 4);
            let cfg = SslConfig { zero_threshold: thr, couple_filter_channel: false, ..SslConfig::new(vec![
                GroupingScheme::new(SchemeKind::NeuronWiseOut, 1.0).with_layers(LayerSelector::All),
                GroupingScheme::new(SchemeKind::NeuronWiseIn, 1.0),
            ])};
            let r = sparsity_stats(&m, &cfg).unwrap();
            let dead = |xs: Vec<f64>| { let mx = xs.iter().fold(0.0f64, |a, b| a.max(b.abs())); mx < thr || mx == 0.0 };
            let rows = (0..4).filter(|&j| dead(values[j * 6..(j + 1) * 6].to_vec())).count();
            let cols = (0..6).filter(|&i| dead((0..4).map(|j| values[j * 6 + i]).collect())).count();
            prop_assert_eq!(r.find(SchemeKind::NeuronWiseOut, "fc", GroupRole::Filter).unwrap().zero_groups, rows);
            prop_assert_eq!(r.find(SchemeKind::NeuronWiseIn, "fc", GroupRole::Channel).unwrap().zero_groups, cols);
        }

        #[test]
        fn positive_homogeneity(values in random_weights(), alpha in -3.0f64..3.0) {
            let m = single_fc(&values, 3);
            let mut scaled = m.clone();
            for v in scaled.weights_mut(0).unwrap().weights_mut() { *v *= alpha; }
            for kind in [SchemeKind::FilterWise, SchemeKind::ChannelWise] {
                let g = groups_of(kind, &m);
                let lhs = group_lasso_value(&scaled, &g);
                let rhs = alpha.abs() * group_lasso_value(&m, &g);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
            }
        }

        #[test]
        fn lasso_step_shrinks_groups(values in random_weights(), lr in 1e-3f64..0.1, lam in 1e-3f64..1.0) {
            let m = single_fc(&values, 3);
            let g = groups_of(SchemeKind::FilterWise, &m);
            let grad = group_lasso_grad(&m, &g, 1e-8);
            let mut stepped = m.clone();
            for (w, d) in stepped.weights_mut(0).unwrap().weights_mut().iter_mut().zip(&grad.layer(0).unwrap().weights) {
                *w -= lr * lam * d;
            }
            for grp in &g {
                let before = group_norm(m.weights(0).unwrap(), &grp.members);
                let after = group_norm(stepped.weights(0).unwrap(), &grp.members);
                if before > lr * lam {
                    prop_assert!(after < before);
                }
            }
        }
    }

    #[test]
    fn regularizer_matches_free_functions() {
        let m = tiny_conv(4);
        let cfg = SslConfig::new(vec![
            GroupingScheme::new(SchemeKind::ShapeWise, 0.1),
            GroupingScheme::new(SchemeKind::Filter2DWise, 0.2),
        ]);
        let reg = SslRegularizer::new(&cfg, &m).unwrap();
        let mut expect = Gradients::zeros_like(&m);
        let s = groups_of(SchemeKind::ShapeWise, &m).into_iter().filter(|g| is_conv_layer(&m, g.layer)).collect::<Vec<_>>();
        let k = groups_of(SchemeKind::Filter2DWise, &m).into_iter().filter(|g| is_conv_layer(&m, g.layer)).collect::<Vec<_>>();
        accumulate_group_lasso_grad(&m, &s, 1e-8, 0.1, &mut expect);
        accumulate_group_lasso_grad(&m, &k, 1e-8, 0.2, &mut expect);
        assert_eq!(reg.gradient(&m), expect);
        let pen = 0.1 * group_lasso_value(&m, &s) + 0.2 * group_lasso_value(&m, &k);
        assert!((reg.penalty(&m) - pen).abs() < 1e-12);
    }
}

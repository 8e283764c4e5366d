//! Architectures and parameters: the classifier zoo (CNN4-BN, ResNet
//! variants, a minimal MLP for gradient-oracle tests), width-scaled submodel
//! extraction, the conditional generators with their label-merge operators,
//! budget plans, and the checkpoint format.
//!
//! Every family is described by a small layer plan; building, forward
//! evaluation, shape validation, and prefix-channel slicing all walk the same
//! plan, so they cannot drift apart.

use std::path::Path;

use dfdg_nn::{init, Tape, TensorId};
use indexmap::IndexMap;
use ndarray::{Array1, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DfdgError, Result};

// ---------------------------------------------------------------------------
// specs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelFamily {
    /// Four conv3x3+BN+ReLU+maxpool blocks with widths (b, 2b, 4b, 8b),
    /// global average pooling, and a linear head. `base_width` 64 gives the
    /// canonical (64, 128, 256, 512).
    Cnn4Bn { base_width: usize },
    Resnet18,
    Resnet20,
    Resnet34,
    /// Flatten -> linear -> ReLU -> linear. Exists for fast, exhaustive
    /// finite-difference testing of the distillation losses.
    Mlp2 { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub family: ModelFamily,
    /// Width capability R: hidden channel counts are ceil(R * width), min 1.
    pub width_ratio: f64,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
}

impl ModelSpec {
    pub fn new(family: ModelFamily, num_classes: usize, input_shape: (usize, usize, usize)) -> Self {
        ModelSpec { family, width_ratio: 1.0, num_classes, input_shape }
    }

    fn scaled(&self, width: usize) -> usize {
        scaled_width(width, self.width_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(DfdgError::Config(m));
        if !(self.width_ratio > 0.0 && self.width_ratio <= 1.0) {
            return cfg(format!("width_ratio {} outside (0, 1]", self.width_ratio));
        }
        if self.num_classes == 0 || self.num_classes > 100_000 {
            return cfg(format!("num_classes {} out of range", self.num_classes));
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 || c > 64 || h > 4096 || w > 4096 {
            return cfg(format!("input_shape {:?} out of range", self.input_shape));
        }
        match self.family {
            ModelFamily::Cnn4Bn { base_width } => {
                if base_width == 0 || base_width > 4096 {
                    return cfg(format!("cnn4 base_width {base_width} out of range"));
                }
                if h % 16 != 0 || w % 16 != 0 {
                    return cfg(format!("cnn4 needs sides divisible by 16, got {h}x{w}"));
                }
            }
            ModelFamily::Mlp2 { hidden } => {
                if hidden == 0 || hidden > 65_536 {
                    return cfg(format!("mlp2 hidden {hidden} out of range"));
                }
            }
            ModelFamily::Resnet18 | ModelFamily::Resnet34 => {
                if h % 8 != 0 || w % 8 != 0 {
                    return cfg(format!("resnet18/34 needs sides divisible by 8, got {h}x{w}"));
                }
            }
            ModelFamily::Resnet20 => {
                if h % 4 != 0 || w % 4 != 0 {
                    return cfg(format!("resnet20 needs sides divisible by 4, got {h}x{w}"));
                }
            }
        }
        Ok(())
    }
}

pub fn scaled_width(width: usize, ratio: f64) -> usize {
    ((width as f64 * ratio).ceil() as usize).max(1)
}

/// Width-scale a spec: hidden widths shrink by `r` (composed with any
/// existing ratio), input channels and classifier width stay fixed.
pub fn extract_submodel(global: &ModelSpec, r: f64) -> Result<ModelSpec> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(DfdgError::Config(format!("submodel ratio {r} outside (0, 1]")));
    }
    let mut spec = global.clone();
    spec.width_ratio = global.width_ratio * r;
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// budget plans

/// Exponentially distributed width budgets R_i = (1/2)^min(sigma, floor(rho*i/N))
/// for 1-based client index i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub num_clients: usize,
    pub sigma: u32,
    pub rho: u32,
    pub ratios: Vec<f64>,
}

pub fn budget_plan(num_clients: usize, sigma: u32, rho: u32) -> BudgetPlan {
    let ratios = (1..=num_clients)
        .map(|i| {
            let exponent = ((rho as usize * i) / num_clients).min(sigma as usize);
            0.5f64.powi(exponent as i32)
        })
        .collect();
    BudgetPlan { num_clients, sigma, rho, ratios }
}

// ---------------------------------------------------------------------------
// generators

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeOp {
    Mul,
    Add,
    Cat,
    Ncat,
    None,
}

impl MergeOp {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mul" => MergeOp::Mul,
            "add" => MergeOp::Add,
            "cat" => MergeOp::Cat,
            "ncat" => MergeOp::Ncat,
            "none" => MergeOp::None,
            other => return Err(DfdgError::Config(format!("unknown merge operator `{other}`"))),
        })
    }

    /// Whether a trainable label-embedding table exists.
    pub fn uses_embedding(self) -> bool {
        matches!(self, MergeOp::Mul | MergeOp::Add | MergeOp::Cat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub image_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub noise_dim: usize,
    pub merge: MergeOp,
    /// 64 gives the paper channels (512, 256, 128 [, 64]); smaller values
    /// shrink every stage proportionally for desk-scale runs.
    pub base_width: usize,
}

impl GeneratorSpec {
    /// Input width of the first deconvolution after merging labels.
    pub fn merged_dim(&self) -> usize {
        match self.merge {
            MergeOp::Cat => 2 * self.noise_dim,
            MergeOp::Ncat => self.noise_dim + 1,
            _ => self.noise_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(DfdgError::Config(m));
        let (c, h, w) = self.image_shape;
        if h != w || !(h == 16 || h == 32 || h == 64) {
            return cfg(format!("generator supports square 16/32/64 images, got {h}x{w}"));
        }
        if c == 0 || c > 16 {
            return cfg(format!("generator image channels {c} out of range"));
        }
        if self.noise_dim == 0 || self.noise_dim > 65_536 {
            return cfg(format!("noise_dim {} out of range", self.noise_dim));
        }
        if self.num_classes == 0 || self.num_classes > 100_000 {
            return cfg(format!("num_classes {} out of range", self.num_classes));
        }
        if self.base_width == 0 || self.base_width > 4096 {
            return cfg(format!("generator base_width {} out of range", self.base_width));
        }
        Ok(())
    }

    /// Deconvolution stages: (cin, cout, kernel, stride, pad, bn, tanh).
    fn stages(&self) -> Vec<(usize, usize, usize, usize, usize, bool, bool)> {
        let m = self.merged_dim();
        let b = self.base_width;
        let img_c = self.image_shape.0;
        match self.image_shape.1 {
            // reduced two-deconvolution variant for the 16x16 procedural set:
            // 1x1 -> 4x4 -> 16x16, keeping BN on the intermediate stage
            16 => vec![
                (m, 2 * b, 4, 1, 0, true, false),
                (2 * b, img_c, 4, 4, 0, false, true),
            ],
            32 => vec![
                (m, 8 * b, 4, 1, 0, false, false),
                (8 * b, 4 * b, 4, 2, 1, true, false),
                (4 * b, 2 * b, 4, 2, 1, true, false),
                (2 * b, img_c, 4, 2, 1, false, true),
            ],
            64 => vec![
                (m, 8 * b, 4, 1, 0, false, false),
                (8 * b, 4 * b, 4, 2, 1, true, false),
                (4 * b, 2 * b, 4, 2, 1, true, false),
                (2 * b, b, 4, 2, 1, true, false),
                (b, img_c, 4, 2, 1, false, true),
            ],
            _ => unreachable!("validated image side"),
        }
    }
}

/// A conditional generator: deconvolution weights plus (merge-dependent) the
/// label embedding table, wrapped in the common parameter container.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorState {
    pub params: ParameterSet,
}

impl GeneratorState {
    pub fn spec(&self) -> &GeneratorSpec {
        match &self.params.arch {
            ArchSpec::Generator(g) => g,
            ArchSpec::Model(_) => unreachable!("generator state always wraps a generator arch"),
        }
    }
}

// ---------------------------------------------------------------------------
// parameter container

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "spec", rename_all = "snake_case")]
pub enum ArchSpec {
    Model(ModelSpec),
    Generator(GeneratorSpec),
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ArchSpec::Model(m) => m.validate(),
            ArchSpec::Generator(g) => g.validate(),
        }
    }
}

/// Named dense arrays instantiating an architecture. Entry order is the
/// builder's deterministic order; normalization running statistics live here
/// too (entries ending in `.running_mean` / `.running_var`), so averaging a
/// homogeneous federation averages them as well.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub arch: ArchSpec,
    pub entries: IndexMap<String, ArrayD<f64>>,
}

impl ParameterSet {
    pub fn model_spec(&self) -> Option<&ModelSpec> {
        match &self.arch {
            ArchSpec::Model(m) => Some(m),
            ArchSpec::Generator(_) => None,
        }
    }

    pub fn is_trainable(name: &str) -> bool {
        !name.ends_with(".running_mean") && !name.ends_with(".running_var")
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| Self::is_trainable(n))
            .map(|(_, a)| a.len())
            .sum()
    }

    /// Elementwise mean; requires bit-identical architecture specs.
    pub fn average(sets: &[&ParameterSet]) -> Result<ParameterSet> {
        let first = *sets.first().ok_or_else(|| DfdgError::Config("average of zero parameter sets".into()))?;
        for s in sets {
            if s.arch != first.arch {
                return Err(DfdgError::Config("averaging parameter sets with different specs".into()));
            }
        }
        let mut entries = IndexMap::new();
        for (name, a0) in &first.entries {
            let mut acc = a0.clone();
            for s in &sets[1..] {
                acc += &s.entries[name];
            }
            acc /= sets.len() as f64;
            entries.insert(name.clone(), acc);
        }
        Ok(ParameterSet { arch: first.arch.clone(), entries })
    }

    fn bn_stat(&self, name: &str) -> Array1<f64> {
        self.entries[name]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("bn statistic is 1-d")
            .to_owned()
    }
}

// ---------------------------------------------------------------------------
// layer plans

enum Layer {
    Conv { name: String, cout: usize, cin: usize, k: usize, stride: usize, pad: usize },
    Bn { name: String, c: usize },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    Flatten { dim: usize },
    Linear { name: String, cin: usize, cout: usize },
    /// out = relu(body(x) + shortcut(x)); empty shortcut means identity.
    Block { body: Vec<Layer>, shortcut: Vec<Layer> },
}

fn conv(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Layer {
    Layer::Conv { name: name.into(), cout, cin, k, stride, pad }
}

fn bn(name: impl Into<String>, c: usize) -> Layer {
    Layer::Bn { name: name.into(), c }
}

fn plan(spec: &ModelSpec) -> Vec<Layer> {
    let (in_c, side, _) = spec.input_shape;
    match spec.family {
        ModelFamily::Cnn4Bn { base_width } => {
            let widths: Vec<usize> = (0..4).map(|i| spec.scaled(base_width << i)).collect();
            let mut layers = Vec::new();
            let mut cin = in_c;
            for (i, &w) in widths.iter().enumerate() {
                let p = format!("block{}", i + 1);
                layers.push(conv(format!("{p}.conv.w"), cin, w, 3, 1, 1));
                layers.push(bn(format!("{p}.bn"), w));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool2);
                cin = w;
            }
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Linear { name: "fc".into(), cin, cout: spec.num_classes });
            layers
        }
        ModelFamily::Resnet18 => resnet_plan(spec, in_c, side, &[64, 128, 256, 512], &[2, 2, 2, 2]),
        ModelFamily::Resnet34 => resnet_plan(spec, in_c, side, &[64, 128, 256, 512], &[3, 4, 6, 3]),
        ModelFamily::Resnet20 => resnet_plan(spec, in_c, side, &[16, 32, 64], &[3, 3, 3]),
        ModelFamily::Mlp2 { hidden } => {
            let dim = in_c * side * spec.input_shape.2;
            let h = spec.scaled(hidden);
            vec![
                Layer::Flatten { dim },
                Layer::Linear { name: "fc1".into(), cin: dim, cout: h },
                Layer::Relu,
                Layer::Linear { name: "fc2".into(), cin: h, cout: spec.num_classes },
            ]
        }
    }
}

fn resnet_plan(spec: &ModelSpec, in_c: usize, side: usize, widths: &[usize], counts: &[usize]) -> Vec<Layer> {
    let stem_w = spec.scaled(widths[0]);
    let mut layers = vec![
        conv("stem.conv.w", in_c, stem_w, 3, 1, 1),
        bn("stem.bn", stem_w),
        Layer::Relu,
    ];
    // 64px inputs get an extra halving so the deepest feature map stays small
    if side >= 64 {
        layers.push(Layer::MaxPool2);
    }
    let mut cin = stem_w;
    for (s, (&w, &count)) in widths.iter().zip(counts.iter()).enumerate() {
        let w = spec.scaled(w);
        for b in 0..count {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let p = format!("layer{}.{}", s + 1, b);
            let body = vec![
                conv(format!("{p}.conv1.w"), cin, w, 3, stride, 1),
                bn(format!("{p}.bn1"), w),
                Layer::Relu,
                conv(format!("{p}.conv2.w"), w, w, 3, 1, 1),
                bn(format!("{p}.bn2"), w),
            ];
            let shortcut = if stride != 1 || cin != w {
                vec![conv(format!("{p}.down.conv.w"), cin, w, 1, stride, 0), bn(format!("{p}.down.bn"), w)]
            } else {
                Vec::new()
            };
            layers.push(Layer::Block { body, shortcut });
            cin = w;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear { name: "fc".into(), cin, cout: spec.num_classes });
    layers
}

/// The scaled hidden channel widths in layer order (conv output channels and
/// MLP hidden sizes), for inspecting heterogeneous-width runs.
pub fn hidden_widths(spec: &ModelSpec) -> Vec<usize> {
    fn walk(layers: &[Layer], out: &mut Vec<usize>) {
        for l in layers {
            match l {
                Layer::Conv { cout, .. } => out.push(*cout),
                Layer::Block { body, shortcut } => {
                    walk(body, out);
                    walk(shortcut, out);
                }
                Layer::Linear { name, cout, .. } if name == "fc1" => out.push(*cout),
                _ => {}
            }
        }
    }
    let mut out = Vec::new();
    walk(&plan(spec), &mut out);
    out
}

fn collect_shapes(layers: &[Layer], out: &mut Vec<(String, Vec<usize>)>) {
    for l in layers {
        match l {
            Layer::Conv { name, cout, cin, k, .. } => out.push((name.clone(), vec![*cout, *cin, *k, *k])),
            Layer::Bn { name, c } => {
                out.push((format!("{name}.gamma"), vec![*c]));
                out.push((format!("{name}.beta"), vec![*c]));
                out.push((format!("{name}.running_mean"), vec![*c]));
                out.push((format!("{name}.running_var"), vec![*c]));
            }
            Layer::Linear { name, cin, cout } => {
                out.push((format!("{name}.w"), vec![*cin, *cout]));
                out.push((format!("{name}.b"), vec![*cout]));
            }
            Layer::Block { body, shortcut } => {
                collect_shapes(body, out);
                collect_shapes(shortcut, out);
            }
            _ => {}
        }
    }
}

/// Entry name -> shape for any architecture, in builder order.
pub fn shape_map(arch: &ArchSpec) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    match arch {
        ArchSpec::Model(spec) => collect_shapes(&plan(spec), &mut out),
        ArchSpec::Generator(spec) => {
            if spec.merge.uses_embedding() {
                out.push(("embed.e".into(), vec![spec.num_classes, spec.noise_dim]));
            }
            for (i, (cin, cout, k, _, _, has_bn, _)) in spec.stages().iter().enumerate() {
                let p = format!("deconv{}", i + 1);
                out.push((format!("{p}.w"), vec![*cin, *cout, *k, *k]));
                if *has_bn {
                    out.push((format!("{p}.bn.gamma"), vec![*cout]));
                    out.push((format!("{p}.bn.beta"), vec![*cout]));
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// building

/// Deterministically initialize a model for `seed`: Kaiming-normal conv and
/// linear weights, unit/zero BN affine, zero/unit running statistics.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut entries = IndexMap::new();
    for (name, shape) in shape_map(&ArchSpec::Model(spec.clone())) {
        let value = if name.ends_with(".gamma") || name.ends_with(".running_var") {
            init::ones(&shape)
        } else if name.ends_with(".beta") || name.ends_with(".running_mean") || name.ends_with(".b") {
            init::zeros(&shape)
        } else if name.ends_with(".w") && shape.len() == 4 {
            let fan_in = shape[1] * shape[2] * shape[3];
            init::kaiming_normal(&shape, fan_in, &mut rng)
        } else if name.ends_with(".w") && shape.len() == 2 {
            init::kaiming_normal(&shape, shape[0], &mut rng)
        } else {
            unreachable!("unclassified entry {name}")
        };
        entries.insert(name, value);
    }
    Ok(ParameterSet { arch: ArchSpec::Model(spec.clone()), entries })
}

/// DCGAN-style initialization: N(0, 0.02) deconvolution weights, unit/zero
/// BN affine, standard-normal label embeddings.
pub fn build_generator(spec: &GeneratorSpec, seed: u64) -> Result<GeneratorState> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut entries = IndexMap::new();
    for (name, shape) in shape_map(&ArchSpec::Generator(spec.clone())) {
        let value = if name == "embed.e" {
            init::normal(&shape, 0.0, 1.0, &mut rng)
        } else if name.ends_with(".gamma") {
            init::ones(&shape)
        } else if name.ends_with(".beta") {
            init::zeros(&shape)
        } else {
            init::normal(&shape, 0.0, 0.02, &mut rng)
        };
        entries.insert(name, value);
    }
    Ok(GeneratorState { params: ParameterSet { arch: ArchSpec::Generator(spec.clone()), entries } })
}

/// Prefix-channel slice of `global` at the shapes of `sub_spec`: every entry
/// keeps its leading slice along each axis. The classifier output axis is
/// unchanged by construction (sub specs never scale `num_classes`).
pub fn slice_parameters(global: &ParameterSet, sub_spec: &ModelSpec) -> Result<ParameterSet> {
    let global_spec = global
        .model_spec()
        .ok_or_else(|| DfdgError::Config("slice_parameters expects a model parameter set".into()))?;
    if std::mem::discriminant(&global_spec.family) != std::mem::discriminant(&sub_spec.family) {
        return Err(DfdgError::Config("slice_parameters: family mismatch".into()));
    }
    let mut entries = IndexMap::new();
    for (name, shape) in shape_map(&ArchSpec::Model(sub_spec.clone())) {
        let src = global.entries.get(&name).ok_or_else(|| {
            DfdgError::Config(format!("slice_parameters: entry `{name}` missing from global model"))
        })?;
        if src.ndim() != shape.len() {
            return Err(DfdgError::Config(format!("slice_parameters: rank mismatch for `{name}`")));
        }
        let mut sliced = src.view();
        for (axis, &dim) in shape.iter().enumerate() {
            if src.shape()[axis] < dim {
                return Err(DfdgError::Config(format!(
                    "slice_parameters: `{name}` axis {axis} has {} < {dim}",
                    src.shape()[axis]
                )));
            }
            sliced.slice_axis_inplace(ndarray::Axis(axis), ndarray::Slice::from(0..dim as isize));
        }
        entries.insert(name, sliced.to_owned());
    }
    Ok(ParameterSet { arch: ArchSpec::Model(sub_spec.clone()), entries })
}

// ---------------------------------------------------------------------------
// forward evaluation

/// Tape handles for a parameter set staged onto a tape.
pub struct Staged {
    pub ids: IndexMap<String, TensorId>,
}

/// Stage all trainable entries as tape leaves. Frozen models (teachers, the
/// student during generator updates) stage with `trainable = false` so
/// backward never computes their weight gradients.
pub fn stage_params(tape: &mut Tape, ps: &ParameterSet, trainable: bool) -> Staged {
    let mut ids = IndexMap::new();
    for (name, value) in &ps.entries {
        if ParameterSet::is_trainable(name) {
            ids.insert(name.clone(), tape.leaf(value.clone(), trainable));
        }
    }
    Staged { ids }
}

/// Batch statistics observed by one training-mode forward pass, keyed by BN
/// layer name, for running-average maintenance.
pub struct BnObservation {
    pub name: String,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Fold observed batch statistics into the stored running statistics with the
/// conventional momentum-0.1 exponential update.
pub fn apply_bn_observations(ps: &mut ParameterSet, obs: &[BnObservation]) {
    const MOMENTUM: f64 = 0.1;
    for o in obs {
        let mean_name = format!("{}.running_mean", o.name);
        let var_name = format!("{}.running_var", o.name);
        for (name, batch) in [(mean_name, &o.mean), (var_name, &o.var)] {
            let entry = ps.entries.get_mut(&name).expect("bn entry exists");
            for (r, &b) in entry.iter_mut().zip(batch.iter()) {
                *r = (1.0 - MOMENTUM) * *r + MOMENTUM * b;
            }
        }
    }
}

fn forward_layers(
    tape: &mut Tape,
    layers: &[Layer],
    staged: &Staged,
    ps: &ParameterSet,
    mut x: TensorId,
    train_bn: bool,
    obs: &mut Vec<BnObservation>,
) -> TensorId {
    for layer in layers {
        x = match layer {
            Layer::Conv { name, stride, pad, .. } => tape.conv2d(x, staged.ids[name], *stride, *pad),
            Layer::Bn { name, .. } => {
                let gamma = staged.ids[&format!("{name}.gamma")];
                let beta = staged.ids[&format!("{name}.beta")];
                if train_bn {
                    let (y, stats) = tape.batch_norm_train(x, gamma, beta);
                    obs.push(BnObservation { name: name.clone(), mean: stats.mean, var: stats.var });
                    y
                } else {
                    let mean = ps.bn_stat(&format!("{name}.running_mean"));
                    let var = ps.bn_stat(&format!("{name}.running_var"));
                    tape.batch_norm_eval(x, gamma, beta, &mean, &var)
                }
            }
            Layer::Relu => tape.relu(x),
            Layer::MaxPool2 => tape.max_pool2(x),
            Layer::GlobalAvgPool => tape.global_avg_pool(x),
            Layer::Flatten { dim } => {
                let b = tape.shape(x)[0];
                tape.reshape(x, &[b, *dim])
            }
            Layer::Linear { name, .. } => {
                let y = tape.matmul(x, staged.ids[&format!("{name}.w")]);
                tape.add_broadcast(y, staged.ids[&format!("{name}.b")])
            }
            Layer::Block { body, shortcut } => {
                let main = forward_layers(tape, body, staged, ps, x, train_bn, obs);
                let side = if shortcut.is_empty() {
                    x
                } else {
                    forward_layers(tape, shortcut, staged, ps, x, train_bn, obs)
                };
                let sum = tape.add(main, side);
                tape.relu(sum)
            }
        };
    }
    x
}

/// Forward a batch of images to logits. `train_bn` selects batch statistics
/// (returning what was observed) versus stored running statistics.
pub fn forward_model(
    tape: &mut Tape,
    ps: &ParameterSet,
    staged: &Staged,
    x: TensorId,
    train_bn: bool,
) -> (TensorId, Vec<BnObservation>) {
    let spec = ps.model_spec().expect("forward_model expects a model");
    let layers = plan(spec);
    let mut obs = Vec::new();
    let out = forward_layers(tape, &layers, staged, ps, x, train_bn, &mut obs);
    (out, obs)
}

/// Merge noise and labels into the generator input per the configured
/// operator. Returns a `[B, merged_dim]` tensor.
pub fn merge_inputs(
    tape: &mut Tape,
    spec: &GeneratorSpec,
    staged: &Staged,
    z: TensorId,
    y: &[usize],
) -> TensorId {
    match spec.merge {
        MergeOp::Mul => {
            let e = tape.gather_rows(staged.ids["embed.e"], y);
            tape.mul(z, e)
        }
        MergeOp::Add => {
            let e = tape.gather_rows(staged.ids["embed.e"], y);
            tape.add(z, e)
        }
        MergeOp::Cat => {
            let e = tape.gather_rows(staged.ids["embed.e"], y);
            tape.concat(z, e, 1)
        }
        MergeOp::Ncat => {
            let denom = (spec.num_classes.max(2) - 1) as f64;
            let col: Vec<f64> = y.iter().map(|&c| c as f64 / denom).collect();
            let col = tape.constant(ArrayD::from_shape_vec(IxDyn(&[y.len(), 1]), col).unwrap());
            tape.concat(z, col, 1)
        }
        MergeOp::None => z,
    }
}

/// Run the generator on a noise/label batch: returns the synthetic images
/// `s` in (-1,1) and the merged input `h` (both on the tape, so gradients
/// flow to the generator parameters when staged trainable). BN runs in
/// training mode always; generators are only ever sampled while training.
pub fn forward_generator(
    tape: &mut Tape,
    state: &GeneratorState,
    staged: &Staged,
    z: TensorId,
    y: &[usize],
) -> (TensorId, TensorId) {
    let spec = state.spec().clone();
    let h = merge_inputs(tape, &spec, staged, z, y);
    let batch = tape.shape(h)[0];
    let m = spec.merged_dim();
    let mut x = tape.reshape(h, &[batch, m, 1, 1]);
    for (i, (_, _, _, stride, pad, has_bn, is_tanh)) in spec.stages().iter().enumerate() {
        let p = format!("deconv{}", i + 1);
        x = tape.conv_transpose2d(x, staged.ids[&format!("{p}.w")], *stride, *pad);
        if *has_bn {
            let gamma = staged.ids[&format!("{p}.bn.gamma")];
            let beta = staged.ids[&format!("{p}.bn.beta")];
            let (y_bn, _) = tape.batch_norm_train(x, gamma, beta);
            x = y_bn;
        }
        x = if *is_tanh { tape.tanh(x) } else { tape.relu(x) };
    }
    (x, h)
}

// ---------------------------------------------------------------------------
// checkpoints

const CKPT_MAGIC: &[u8; 8] = b"DFDGCKPT";
const CKPT_VERSION: u32 = 1;
const MAX_HEADER: u64 = 16 * 1024 * 1024;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    arch: ArchSpec,
    entries: Vec<EntryMeta>,
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
}

/// Binary layout: magic, u32 LE format version, u64 LE header length, JSON
/// header (arch + entry names/shapes), then all values as f64 LE in entry
/// order.
pub fn encode_checkpoint(ps: &ParameterSet) -> Vec<u8> {
    let header = CheckpointHeader {
        schema_version: CKPT_VERSION,
        arch: ps.arch.clone(),
        entries: ps
            .entries
            .iter()
            .map(|(name, a)| EntryMeta { name: name.clone(), shape: a.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let payload_len: usize = ps.entries.values().map(|a| a.len() * 8).sum();
    let mut out = Vec::with_capacity(8 + 4 + 8 + header_json.len() + payload_len);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for a in ps.entries.values() {
        for &v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decode and fully validate a checkpoint: magic/version, header bounds,
/// entry names and shapes must match the architecture's own shape map, and
/// the payload length must be exact. Never allocates based on unvalidated
/// sizes.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<ParameterSet> {
    let cerr = |m: String| DfdgError::Checkpoint(m);
    if bytes.len() < 8 + 4 + 8 {
        return Err(cerr("truncated preamble".into()));
    }
    if &bytes[..8] != CKPT_MAGIC {
        return Err(cerr("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(cerr(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if header_len > MAX_HEADER || 20 + header_len as usize > bytes.len() {
        return Err(cerr(format!("implausible header length {header_len}")));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..20 + header_len as usize])
        .map_err(|e| cerr(format!("header: {e}")))?;
    if header.schema_version != CKPT_VERSION {
        return Err(cerr(format!("unsupported schema version {}", header.schema_version)));
    }
    header.arch.validate()?;
    let expected = shape_map(&header.arch);
    if header.entries.len() != expected.len() {
        return Err(cerr(format!(
            "{} entries, architecture defines {}",
            header.entries.len(),
            expected.len()
        )));
    }
    let mut payload_elems = 0usize;
    for (meta, (want_name, want_shape)) in header.entries.iter().zip(expected.iter()) {
        if &meta.name != want_name || &meta.shape != want_shape {
            return Err(cerr(format!(
                "entry `{}` {:?} does not match architecture entry `{}` {:?}",
                meta.name, meta.shape, want_name, want_shape
            )));
        }
        let elems: usize = meta.shape.iter().product();
        payload_elems = payload_elems
            .checked_add(elems)
            .ok_or_else(|| cerr("payload size overflow".into()))?;
    }
    let payload = &bytes[20 + header_len as usize..];
    if payload.len() != payload_elems * 8 {
        return Err(cerr(format!(
            "payload is {} bytes, entries require {}",
            payload.len(),
            payload_elems * 8
        )));
    }
    let mut entries = IndexMap::new();
    let mut cursor = 0usize;
    for meta in &header.entries {
        let elems: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(elems);
        for i in 0..elems {
            let off = (cursor + i) * 8;
            data.push(f64::from_le_bytes(payload[off..off + 8].try_into().unwrap()));
        }
        cursor += elems;
        entries.insert(
            meta.name.clone(),
            ArrayD::from_shape_vec(IxDyn(&meta.shape), data).expect("validated shape"),
        );
    }
    Ok(ParameterSet { arch: header.arch, entries })
}

pub fn write_checkpoint(ps: &ParameterSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ps)).map_err(|e| DfdgError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ParameterSet> {
    let bytes = std::fs::read(path).map_err(|e| DfdgError::io(path, e))?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dfdg_nn::gradcheck::check_grad;
    use ndarray::Array2;

    fn toy_cnn_spec() -> ModelSpec {
        ModelSpec::new(ModelFamily::Cnn4Bn { base_width: 4 }, 10, (1, 16, 16))
    }

    fn logits_for(ps: &ParameterSet, x: ndarray::Array4<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let xi = tape.constant(x.into_dyn());
        let staged = stage_params(&mut tape, ps, false);
        let (out, _) = forward_model(&mut tape, ps, &staged, xi, false);
        tape.value_owned(out).into_dimensionality().unwrap()
    }

    #[test]
    fn cnn4_produces_classifier_logits() {
        let spec = ModelSpec::new(ModelFamily::Cnn4Bn { base_width: 8 }, 10, (1, 32, 32));
        let ps = build_model(&spec, 0).unwrap();
        let x = ndarray::Array4::zeros((3, 1, 32, 32));
        assert_eq!(logits_for(&ps, x).shape(), &[3, 10]);
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let spec = toy_cnn_spec();
        let a = build_model(&spec, 7).unwrap();
        let b = build_model(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = build_model(&spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn submodel_examples() {
        let spec = ModelSpec::new(ModelFamily::Cnn4Bn { base_width: 64 }, 10, (1, 32, 32));
        let same = extract_submodel(&spec, 1.0).unwrap();
        assert_eq!(same, spec);
        let half = extract_submodel(&spec, 0.5).unwrap();
        assert_eq!(hidden_widths(&half), vec![32, 64, 128, 256]);
        // floor at one
        assert_eq!(scaled_width(2, 0.25), 1);
        // resnet18 quarter width: every hidden count is ceil(orig/4)
        let rspec = ModelSpec::new(ModelFamily::Resnet18, 10, (3, 32, 32));
        let quarter = extract_submodel(&rspec, 0.25).unwrap();
        for (w, orig) in hidden_widths(&quarter).iter().zip(hidden_widths(&rspec).iter()) {
            assert_eq!(*w, (orig + 3) / 4);
        }
    }

    #[test]
    fn param_count_is_monotone_in_width() {
        for family in [
            ModelFamily::Cnn4Bn { base_width: 16 },
            ModelFamily::Resnet20,
            ModelFamily::Mlp2 { hidden: 32 },
        ] {
            let spec = ModelSpec::new(family, 10, (1, 16, 16));
            let full = build_model(&spec, 0).unwrap().param_count();
            let half = build_model(&extract_submodel(&spec, 0.5).unwrap(), 0).unwrap().param_count();
            let quarter = build_model(&extract_submodel(&spec, 0.25).unwrap(), 0).unwrap().param_count();
            assert!(quarter < half && half < full, "{spec:?}: {quarter} {half} {full}");
        }
    }

    #[test]
    fn resnet_forward_shapes() {
        for (family, shape) in [
            (ModelFamily::Resnet18, (3, 32, 32)),
            (ModelFamily::Resnet20, (3, 32, 32)),
        ] {
            let spec = ModelSpec { family, width_ratio: 0.25, num_classes: 10, input_shape: shape };
            let ps = build_model(&spec, 0).unwrap();
            let x = ndarray::Array4::zeros((2, 3, 32, 32));
            assert_eq!(logits_for(&ps, x).shape(), &[2, 10]);
        }
    }

    #[test]
    fn averaging_requires_identical_specs_and_takes_means() {
        let spec = toy_cnn_spec();
        let a = build_model(&spec, 0).unwrap();
        let b = build_model(&spec, 1).unwrap();
        let avg = ParameterSet::average(&[&a, &b]).unwrap();
        let w_a = &a.entries["block1.conv.w"];
        let w_b = &b.entries["block1.conv.w"];
        let w_avg = &avg.entries["block1.conv.w"];
        for ((x, y), m) in w_a.iter().zip(w_b.iter()).zip(w_avg.iter()) {
            assert!((0.5 * (x + y) - m).abs() < 1e-15);
        }
        let same = ParameterSet::average(&[&a, &a]).unwrap();
        assert_eq!(same, a);
        let narrow = build_model(&extract_submodel(&spec, 0.5).unwrap(), 0).unwrap();
        assert!(ParameterSet::average(&[&a, &narrow]).is_err());
    }

    #[test]
    fn slicing_yields_subspec_shapes_with_prefix_values() {
        let spec = ModelSpec::new(ModelFamily::Cnn4Bn { base_width: 8 }, 10, (1, 16, 16));
        let global = build_model(&spec, 3).unwrap();
        let sub_spec = extract_submodel(&spec, 0.5).unwrap();
        let sliced = slice_parameters(&global, &sub_spec).unwrap();
        let built = build_model(&sub_spec, 3).unwrap();
        for (name, arr) in &built.entries {
            assert_eq!(arr.shape(), sliced.entries[name].shape(), "{name}");
        }
        // prefix property on the first conv
        let g = &global.entries["block1.conv.w"];
        let s = &sliced.entries["block1.conv.w"];
        for co in 0..s.shape()[0] {
            for ki in 0..3 {
                for kj in 0..3 {
                    assert_eq!(g[[co, 0, ki, kj]], s[[co, 0, ki, kj]]);
                }
            }
        }
    }

    #[test]
    fn budget_plan_matches_enumerations() {
        assert_eq!(budget_plan(10, 2, 0).ratios, vec![1.0; 10]);
        assert_eq!(
            budget_plan(10, 2, 2).ratios,
            vec![1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.25]
        );
        assert_eq!(
            budget_plan(10, 2, 3).ratios,
            vec![1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25, 0.25, 0.25, 0.25]
        );
        assert_eq!(
            budget_plan(10, 2, 4).ratios,
            vec![1.0, 1.0, 0.5, 0.5, 0.25, 0.25, 0.25, 0.25, 0.25, 0.25]
        );
    }

    #[test]
    fn generator_output_shapes_match_paper_tables() {
        for (shape, d) in [((1usize, 32usize, 32usize), 100usize), ((3, 32, 32), 200), ((3, 64, 64), 400)] {
            let spec = GeneratorSpec {
                image_shape: shape,
                num_classes: 10,
                noise_dim: d,
                merge: MergeOp::Mul,
                base_width: 8, // shrunk width, same topology
            };
            let gen = build_generator(&spec, 0).unwrap();
            let mut tape = Tape::new();
            let z = tape.constant(ArrayD::zeros(IxDyn(&[2, d])));
            let staged = stage_params(&mut tape, &gen.params, false);
            let (s, h) = forward_generator(&mut tape, &gen, &staged, z, &[0, 1]);
            assert_eq!(tape.shape(s), &[2, shape.0, shape.1, shape.2]);
            assert_eq!(tape.shape(h), &[2, d]);
        }
    }

    #[test]
    fn generator_range_is_open_unit_interval() {
        let spec = GeneratorSpec {
            image_shape: (1, 16, 16),
            num_classes: 10,
            noise_dim: 8,
            merge: MergeOp::Mul,
            base_width: 8,
        };
        let gen = build_generator(&spec, 5).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let z = init::normal(&[4, 8], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let zi = tape.constant(z);
        let staged = stage_params(&mut tape, &gen.params, false);
        let (s, _) = forward_generator(&mut tape, &gen, &staged, zi, &[0, 3, 5, 9]);
        for &v in tape.value(s).iter() {
            assert!(v > -1.0 && v < 1.0, "pixel {v} escaped (-1, 1)");
        }
    }

    #[test]
    fn merge_operator_contracts() {
        let mk_spec = |merge| GeneratorSpec {
            image_shape: (1, 16, 16),
            num_classes: 4,
            noise_dim: 3,
            merge,
            base_width: 4,
        };
        let z_data = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap();
        // NONE passes the noise through untouched
        {
            let spec = mk_spec(MergeOp::None);
            let gen = build_generator(&spec, 0).unwrap();
            let mut tape = Tape::new();
            let z = tape.constant(z_data.clone());
            let staged = stage_params(&mut tape, &gen.params, false);
            let h = merge_inputs(&mut tape, &spec, &staged, z, &[0, 1]);
            assert_eq!(tape.value_owned(h), z_data);
        }
        // MUL with an all-ones embedding row reproduces z
        {
            let spec = mk_spec(MergeOp::Mul);
            let mut gen = build_generator(&spec, 0).unwrap();
            gen.params.entries["embed.e"].fill(1.0);
            let mut tape = Tape::new();
            let z = tape.constant(z_data.clone());
            let staged = stage_params(&mut tape, &gen.params, false);
            let h = merge_inputs(&mut tape, &spec, &staged, z, &[2, 0]);
            assert_eq!(tape.value_owned(h), z_data);
        }
        // CAT doubles the width
        {
            let spec = mk_spec(MergeOp::Cat);
            let gen = build_generator(&spec, 0).unwrap();
            let mut tape = Tape::new();
            let z = tape.constant(z_data.clone());
            let staged = stage_params(&mut tape, &gen.params, false);
            let h = merge_inputs(&mut tape, &spec, &staged, z, &[0, 3]);
            assert_eq!(tape.shape(h), &[2, 6]);
        }
    }

    #[test]
    fn merge_is_differentiable_in_the_embedding() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for merge in [MergeOp::Mul, MergeOp::Add, MergeOp::Cat] {
            let spec = GeneratorSpec {
                image_shape: (1, 16, 16),
                num_classes: 4,
                noise_dim: 3,
                merge,
                base_width: 4,
            };
            let gen = build_generator(&spec, 1).unwrap();
            let z_data = init::normal(&[3, 3], 0.0, 1.0, &mut rng);
            let labels = vec![1usize, 3, 1];
            let e0 = gen.params.entries["embed.e"].clone();
            let h_dim = spec.merged_dim();
            let weights = init::normal(&[3, h_dim], 0.0, 1.0, &mut rng);
            let run = |e_val: &ArrayD<f64>, want_grad: bool| -> (f64, Option<ArrayD<f64>>) {
                let mut tape = Tape::new();
                let z = tape.constant(z_data.clone());
                let e = tape.leaf(e_val.clone(), want_grad);
                let mut staged = Staged { ids: IndexMap::new() };
                staged.ids.insert("embed.e".into(), e);
                let h = merge_inputs(&mut tape, &spec, &staged, z, &labels);
                let wc = tape.constant(weights.clone());
                let p = tape.mul(h, wc);
                let loss = tape.sum_all(p);
                tape.backward(loss);
                (tape.scalar_value(loss), tape.grad_owned(e))
            };
            let (_, grad) = run(&e0, true);
            let grad = grad.expect("embedding gradient exists");
            check_grad(|e| run(e, false).0, &e0, &grad, 1e-5, 1e-4)
                .unwrap_or_else(|err| panic!("{merge:?}: {err}"));
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let spec = toy_cnn_spec();
        let ps = build_model(&spec, 11).unwrap();
        let bytes = encode_checkpoint(&ps);
        let back = parse_checkpoint(&bytes).unwrap();
        assert_eq!(ps, back);
        // generator checkpoints too
        let gspec = GeneratorSpec {
            image_shape: (1, 16, 16),
            num_classes: 10,
            noise_dim: 8,
            merge: MergeOp::Mul,
            base_width: 4,
        };
        let gen = build_generator(&gspec, 0).unwrap();
        let bytes = encode_checkpoint(&gen.params);
        assert_eq!(parse_checkpoint(&bytes).unwrap(), gen.params);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let ps = build_model(&toy_cnn_spec(), 0).unwrap();
        let good = encode_checkpoint(&ps);
        assert!(parse_checkpoint(&[]).is_err());
        assert!(parse_checkpoint(&good[..40]).is_err());
        let mut bad_magic = good.clone();
        bad_magic[0] ^= 0xff;
        assert!(parse_checkpoint(&bad_magic).is_err());
        let mut bad_len = good.clone();
        bad_len[12..20].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(parse_checkpoint(&bad_len).is_err());
        let truncated = &good[..good.len() - 9];
        assert!(parse_checkpoint(truncated).is_err());
    }
}

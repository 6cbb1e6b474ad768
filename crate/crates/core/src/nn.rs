//! Named parameter storage and the forward-pass session that binds stored
//! parameters onto a [`Graph`].

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::ops::{self, Activation, ConvSpec, Mode};
use crate::tensor::{Element, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnMean | ParamKind::BnVar)
    }

    /// Coupled weight decay is applied to conv weights and biases only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }

    pub fn suffix(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::BnGamma => "bn_gamma",
            ParamKind::BnBeta => "bn_beta",
            ParamKind::BnMean => "bn_mean",
            ParamKind::BnVar => "bn_var",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let suffix = name.rsplit('.').next()?;
        [
            ParamKind::Weight,
            ParamKind::Bias,
            ParamKind::BnGamma,
            ParamKind::BnBeta,
            ParamKind::BnMean,
            ParamKind::BnVar,
        ]
        .into_iter()
        .find(|k| k.suffix() == suffix)
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub value: Tensor4<T>,
    pub kind: ParamKind,
}

/// Ordered name → tensor table. Insertion order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element = f32> {
    entries: IndexMap<String, Param<T>>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, stable across platforms and releases
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.rotate_left(29)
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor4<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name, Param { value, kind });
        Ok(())
    }

    /// Kaiming-uniform (fan-in) conv weight plus optional bias.
    pub fn init_conv(&mut self, prefix: &str, spec: &ConvSpec, seed: u64) -> Result<()> {
        let shape = spec.weight_shape();
        let fan_in = (shape.c * shape.h * shape.w) as f64;
        let name = format!("{prefix}.weight");
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
        let bound = (6.0 / fan_in).sqrt();
        let w = Tensor4::from_fn(shape, |_, _, _, _| T::lit(rng.gen_range(-bound..bound)));
        self.insert(name, ParamKind::Weight, w)?;
        if spec.has_bias {
            let bound = 1.0 / fan_in.sqrt();
            let b = Tensor4::from_fn(Shape4::new(spec.out_channels, 1, 1, 1), |_, _, _, _| {
                T::lit(rng.gen_range(-bound..bound))
            });
            self.insert(format!("{prefix}.bias"), ParamKind::Bias, b)?;
        }
        Ok(())
    }

    pub fn init_bn(&mut self, prefix: &str, channels: usize) -> Result<()> {
        let s = Shape4::new(channels, 1, 1, 1);
        self.insert(format!("{prefix}.bn_gamma"), ParamKind::BnGamma, Tensor4::full(s, T::one()))?;
        self.insert(format!("{prefix}.bn_beta"), ParamKind::BnBeta, Tensor4::zeros(s))?;
        self.insert(format!("{prefix}.bn_mean"), ParamKind::BnMean, Tensor4::zeros(s))?;
        self.insert(format!("{prefix}.bn_var"), ParamKind::BnVar, Tensor4::full(s, T::one()))
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor4<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl ExactSizeIterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, p)| p.kind.trainable() && n.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Replaces values by name; shapes must match.
    pub fn assign(&mut self, values: impl IntoIterator<Item = (String, Tensor4<T>)>) -> Result<()> {
        for (name, v) in values {
            let p = self.get_mut(&name)?;
            if p.value.shape() != v.shape() {
                return Err(Error::Format(format!(
                    "{name}: shape {} does not match {}",
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v;
        }
        Ok(())
    }

    /// Replaces every value from `other`, which must hold exactly the same
    /// names and shapes.
    pub fn load_from(&mut self, other: ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (name, p) in other.entries {
            let slot = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name} in checkpoint")))?;
            if slot.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: checkpoint shape {} but model expects {}",
                    p.value.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = p.value;
        }
        Ok(())
    }
}

/// Running-statistics batch moments captured during a training forward.
struct BnUpdate<T: Element> {
    prefix: String,
    saved: ops::BnSaved<T>,
}

/// One forward pass: a fresh graph with stored parameters bound lazily.
pub struct Session<'p, T: Element> {
    pub graph: Graph<T>,
    store: &'p ParamStore<T>,
    bound: IndexMap<String, Var>,
    mode: Mode,
    trainable: bool,
    dropout_seed: u64,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'p, T: Element> Session<'p, T> {
    /// `trainable` binds parameters as gradient-tracking variables.
    pub fn new(store: &'p ParamStore<T>, mode: Mode, trainable: bool, dropout_seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: IndexMap::new(),
            mode,
            trainable,
            dropout_seed,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.tensor(name)?.clone();
        let v = if self.trainable {
            self.graph.variable(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, x: Tensor4<T>) -> Var {
        self.graph.constant(x)
    }

    pub fn conv(&mut self, prefix: &str, x: Var, spec: &ConvSpec) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = if spec.has_bias {
            Some(self.param(&format!("{prefix}.bias"))?)
        } else {
            None
        };
        self.graph.conv2d(x, w, b, spec)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.bn_gamma"))?;
        let beta = self.param(&format!("{prefix}.bn_beta"))?;
        let rm = self.store.tensor(&format!("{prefix}.bn_mean"))?;
        let rv = self.store.tensor(&format!("{prefix}.bn_var"))?;
        let (out, saved) = self.graph.batch_norm(x, gamma, beta, rm, rv, self.mode)?;
        if self.mode == Mode::Train {
            self.bn_updates.push(BnUpdate {
                prefix: prefix.to_string(),
                saved,
            });
        }
        Ok(out)
    }

    /// Conv, then optional BN, then optional activation.
    pub fn conv_bn_act(
        &mut self,
        prefix: &str,
        x: Var,
        spec: &ConvSpec,
        bn: bool,
        act: Option<Activation>,
    ) -> Result<Var> {
        let mut y = self.conv(prefix, x, spec)?;
        if bn {
            y = self.batch_norm(prefix, y)?;
        }
        if let Some(a) = act {
            y = self.graph.activation(y, a);
        }
        Ok(y)
    }

    /// Dropout seeded from the session seed and a per-call salt.
    pub fn dropout(&mut self, x: Var, rate: f64, salt: u64) -> Result<Var> {
        let seed = self.dropout_seed ^ salt.wrapping_mul(0x9E3779B97F4A7C15);
        self.graph.dropout(x, rate, self.mode, seed)
    }

    /// New running statistics from the recorded batch moments, as
    /// `(name, value)` pairs for [`ParamStore::assign`].
    pub fn bn_stat_updates(&self) -> Result<Vec<(String, Tensor4<T>)>> {
        let mut out = Vec::with_capacity(2 * self.bn_updates.len());
        for u in &self.bn_updates {
            let mean_name = format!("{}.bn_mean", u.prefix);
            let var_name = format!("{}.bn_var", u.prefix);
            let mut rm = self.store.tensor(&mean_name)?.clone();
            let mut rv = self.store.tensor(&var_name)?.clone();
            ops::update_running_stats(&mut rm, &mut rv, &u.saved, T::lit(ops::BN_MOMENTUM));
            out.push((mean_name, rm));
            out.push((var_name, rv));
        }
        Ok(out)
    }

    /// Pulls per-parameter gradients out of a backward pass, in store order.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(String, Tensor4<T>)> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// One row of a static shape and cost trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub name: String,
    pub op: String,
    pub input: Shape4,
    pub output: Shape4,
    pub params: usize,
    /// Convolution multiply-accumulates for the whole batch.
    pub macs: u64,
    /// BN, activation, pooling, resize and elementwise work, one per element
    /// touched (four per bilinear output).
    pub elem_ops: u64,
}

/// Static walk over a network that records shapes, parameter counts and
/// costs without evaluating anything.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Trace {
    pub layers: Vec<LayerRecord>,
}

impl Trace {
    pub fn conv(
        &mut self,
        name: &str,
        spec: &ConvSpec,
        input: Shape4,
        bn: bool,
        act: Option<Activation>,
    ) -> Result<Shape4> {
        crate::error::check_dim("conv2d", crate::error::Axis::Channels, spec.in_channels, input.c)?;
        let (h, w) = spec.output_hw(input.h, input.w)?;
        let output = Shape4::new(input.n, spec.out_channels, h, w);
        let elems = output.numel() as u64;
        let extra = if bn { elems } else { 0 } + if act.is_some() { elems } else { 0 };
        self.layers.push(LayerRecord {
            name: name.to_string(),
            op: describe_conv(spec, bn, act),
            input,
            output,
            params: spec.param_count() + if bn { 2 * spec.out_channels } else { 0 },
            macs: spec.macs(input.h, input.w)? * input.n as u64,
            elem_ops: extra,
        });
        Ok(output)
    }

    pub fn elementwise(&mut self, name: &str, op: &str, input: Shape4, output: Shape4, ops_per_output: u64) {
        self.layers.push(LayerRecord {
            name: name.to_string(),
            op: op.to_string(),
            input,
            output,
            params: 0,
            macs: 0,
            elem_ops: output.numel() as u64 * ops_per_output,
        });
    }

    pub fn params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn elem_ops(&self) -> u64 {
        self.layers.iter().map(|l| l.elem_ops).sum()
    }

    pub fn filter(&self, prefix: &str) -> impl Iterator<Item = &LayerRecord> {
        let prefix = prefix.to_string();
        self.layers.iter().filter(move |l| l.name.starts_with(&prefix))
    }
}

fn describe_conv(spec: &ConvSpec, bn: bool, act: Option<Activation>) -> String {
    let kind = if spec.kernel == (1, 1) {
        "conv1x1".to_string()
    } else if spec.is_depthwise() && spec.groups > 1 {
        format!("dwconv{}x{}", spec.kernel.0, spec.kernel.1)
    } else {
        format!("conv{}x{}", spec.kernel.0, spec.kernel.1)
    };
    let mut s = kind;
    if spec.stride > 1 {
        s.push_str(&format!(" s{}", spec.stride));
    }
    if spec.dilation > 1 {
        s.push_str(&format!(" d{}", spec.dilation));
    }
    if bn {
        s.push_str(" +bn");
    }
    if let Some(a) = act {
        s.push_str(&format!(" +{}", a.name()));
    }
    s
}

/// Rounds `v` to a multiple of `divisor`, never dropping below 90% of `v`.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = (((v + d / 2.0) / d).floor() * d).max(d);
    if new_v < 0.9 * v {
        new_v += d;
    }
    new_v as usize
}

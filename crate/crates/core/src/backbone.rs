//! MobileNetV3-Large encoder truncated after the final 1x1 conv (960
//! channels), with the last stage dilated so the deep features sit at
//! output stride 16.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{make_divisible, ParamStore, Session, Trace};
use crate::ops::{Activation, ConvSpec};
use crate::tensor::{Element, Shape4};

/// One bottleneck row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BneckSpec {
    pub kernel: usize,
    pub expansion: usize,
    pub out_channels: usize,
    pub use_se: bool,
    pub nonlinearity: Activation,
    pub stride: usize,
    pub dilation: usize,
}

const fn row(kernel: usize, exp: usize, out: usize, se: bool, nl: Activation, stride: usize, dilation: usize) -> BneckSpec {
    BneckSpec {
        kernel,
        expansion: exp,
        out_channels: out,
        use_se: se,
        nonlinearity: nl,
        stride,
        dilation,
    }
}

use Activation::{HSwish as HS, Relu as RE};

/// Bottleneck rows of the first block (after the 3x3 stem conv).
pub const BLOCK1_ROWS: [BneckSpec; 6] = [
    row(3, 16, 16, false, RE, 1, 1),
    row(3, 64, 24, false, RE, 2, 1),
    row(3, 72, 24, false, RE, 1, 1),
    row(5, 72, 40, true, RE, 2, 1),
    row(5, 120, 40, true, RE, 1, 1),
    row(5, 120, 40, true, RE, 1, 1),
];

/// Bottleneck rows of the second block (before the final 1x1 conv). The
/// 672 -> 160 row trades its stride for dilation 2.
pub const BLOCK2_ROWS: [BneckSpec; 9] = [
    row(3, 240, 80, false, HS, 2, 1),
    row(3, 200, 80, false, HS, 1, 1),
    row(3, 184, 80, false, HS, 1, 1),
    row(3, 184, 80, false, HS, 1, 1),
    row(3, 480, 112, true, HS, 1, 1),
    row(3, 672, 112, true, HS, 1, 1),
    row(5, 672, 160, true, HS, 1, 2),
    row(5, 960, 160, true, HS, 1, 2),
    row(5, 960, 160, true, HS, 1, 2),
];

pub const STEM_CHANNELS: usize = 16;
pub const DEEP_CHANNELS: usize = 960;

/// Squeeze width of the SE gate for an expansion width.
pub fn se_channels(expansion: usize) -> usize {
    make_divisible(expansion as f64 / 4.0, 8)
}

/// Scales a channel count by a width multiplier, keeping multiples of 8.
pub fn scale_channels(c: usize, width: f64) -> usize {
    if width == 1.0 {
        c
    } else {
        make_divisible(c as f64 * width, 8)
    }
}

/// A built inverted-residual block.
#[derive(Debug, Clone)]
pub struct Bneck {
    pub prefix: String,
    pub in_channels: usize,
    pub spec: BneckSpec,
}

impl Bneck {
    pub fn has_residual(&self) -> bool {
        self.spec.stride == 1 && self.in_channels == self.spec.out_channels
    }

    pub fn expand_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.in_channels, self.spec.expansion)
    }

    pub fn depthwise_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.spec.expansion, self.spec.kernel, self.spec.stride, self.spec.dilation)
    }

    pub fn se_specs(&self) -> (ConvSpec, ConvSpec) {
        let sq = se_channels(self.spec.expansion);
        (
            ConvSpec::pointwise(self.spec.expansion, sq).with_bias(true),
            ConvSpec::pointwise(sq, self.spec.expansion).with_bias(true),
        )
    }

    pub fn project_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.spec.expansion, self.spec.out_channels)
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn init<T: Element>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        store.init_conv(&self.name("expand"), &self.expand_spec(), seed)?;
        store.init_bn(&self.name("expand"), self.spec.expansion)?;
        store.init_conv(&self.name("depthwise"), &self.depthwise_spec(), seed)?;
        store.init_bn(&self.name("depthwise"), self.spec.expansion)?;
        if self.spec.use_se {
            let (fc1, fc2) = self.se_specs();
            store.init_conv(&self.name("se.fc1"), &fc1, seed)?;
            store.init_conv(&self.name("se.fc2"), &fc2, seed)?;
        }
        store.init_conv(&self.name("project"), &self.project_spec(), seed)?;
        store.init_bn(&self.name("project"), self.spec.out_channels)
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let nl = Some(self.spec.nonlinearity);
        let e = s.conv_bn_act(&self.name("expand"), x, &self.expand_spec(), true, nl)?;
        let mut d = s.conv_bn_act(&self.name("depthwise"), e, &self.depthwise_spec(), true, nl)?;
        if self.spec.use_se {
            d = squeeze_excite(s, &self.name("se"), d, &self.se_specs())?;
        }
        let p = s.conv_bn_act(&self.name("project"), d, &self.project_spec(), true, None)?;
        if self.has_residual() {
            s.graph.add(p, x)
        } else {
            Ok(p)
        }
    }

    fn trace(&self, t: &mut Trace, input: Shape4) -> Result<Shape4> {
        let nl = Some(self.spec.nonlinearity);
        let e = t.conv(&self.name("expand"), &self.expand_spec(), input, true, nl)?;
        let d = t.conv(&self.name("depthwise"), &self.depthwise_spec(), e, true, nl)?;
        if self.spec.use_se {
            let (fc1, fc2) = self.se_specs();
            let pooled = Shape4::new(d.n, d.c, 1, 1);
            t.elementwise(&self.name("se.pool"), "global_avg_pool", d, pooled, 1);
            let h = t.conv(&self.name("se.fc1"), &fc1, pooled, false, Some(Activation::Relu))?;
            t.conv(&self.name("se.fc2"), &fc2, h, false, Some(Activation::HSigmoid))?;
            t.elementwise(&self.name("se.scale"), "scale_channels", d, d, 1);
        }
        let p = t.conv(&self.name("project"), &self.project_spec(), d, true, None)?;
        if self.has_residual() {
            t.elementwise(&self.name("residual"), "add", p, p, 1);
        }
        Ok(p)
    }
}

/// Pool, 1x1 conv + ReLU, 1x1 conv + h-sigmoid, channel-wise rescale.
pub fn squeeze_excite<T: Element>(
    s: &mut Session<'_, T>,
    prefix: &str,
    x: Var,
    (fc1, fc2): &(ConvSpec, ConvSpec),
) -> Result<Var> {
    let pooled = s.graph.global_avg_pool(x);
    let h = s.conv_bn_act(&format!("{prefix}.fc1"), pooled, fc1, false, Some(Activation::Relu))?;
    let gate = s.conv_bn_act(&format!("{prefix}.fc2"), h, fc2, false, Some(Activation::HSigmoid))?;
    s.graph.scale_channels(x, gate)
}

/// Where a feature tap sits: after `row` of block `block` (1-based block,
/// 0-based row including the stem/final conv rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tap {
    pub block: usize,
    pub row: usize,
}

/// Block-1 output, 64x64x40 at a 512x512 input.
pub const TAP_BLOCK1_64: Tap = Tap { block: 1, row: 6 };
/// Output of the second 24-channel bneck, 128x128x24 at 512x512.
pub const TAP_BLOCK1_128: Tap = Tap { block: 1, row: 3 };

#[derive(Debug, Clone)]
pub struct BackboneOutputs {
    /// Requested skip tap, if any.
    pub skip: Option<Var>,
    pub deep: Var,
}

#[derive(Debug, Clone)]
enum Row {
    Conv {
        prefix: String,
        spec: ConvSpec,
        act: Activation,
    },
    Bneck(Bneck),
}

/// One row of the encoder layout, for shape traces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowTrace {
    pub block: usize,
    pub row: usize,
    pub module: String,
    pub expansion: Option<usize>,
    pub out_channels: usize,
    pub use_se: bool,
    pub nonlinearity: Activation,
    pub stride: usize,
    pub dilation: usize,
    pub input: Shape4,
    pub output: Shape4,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    in_channels: usize,
    blocks: [Vec<Row>; 2],
}

impl Backbone {
    pub fn new(in_channels: usize, width: f64) -> Result<Self> {
        if in_channels == 0 {
            return Err(Error::Config("backbone input channels must be >= 1".into()));
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::Config(format!("width multiplier must be positive, got {width}")));
        }
        let stem = scale_channels(STEM_CHANNELS, width);
        let mut c = stem;
        let mut block1 = vec![Row::Conv {
            prefix: "block1.row0.conv".into(),
            spec: ConvSpec::same(in_channels, stem, 3, 1).with_stride(2),
            act: Activation::HSwish,
        }];
        let mut block2 = Vec::new();
        for (b, rows, out) in [(1, &BLOCK1_ROWS[..], &mut block1), (2, &BLOCK2_ROWS[..], &mut block2)] {
            let first = if b == 1 { 1 } else { 0 };
            for (j, r) in rows.iter().enumerate() {
                let spec = BneckSpec {
                    expansion: scale_channels(r.expansion, width),
                    out_channels: scale_channels(r.out_channels, width),
                    ..*r
                };
                out.push(Row::Bneck(Bneck {
                    prefix: format!("block{b}.row{}", j + first),
                    in_channels: c,
                    spec,
                }));
                c = spec.out_channels;
            }
        }
        let deep = scale_channels(DEEP_CHANNELS, width);
        block2.push(Row::Conv {
            prefix: format!("block2.row{}.conv", BLOCK2_ROWS.len()),
            spec: ConvSpec::pointwise(c, deep),
            act: Activation::HSwish,
        });
        Ok(Self {
            in_channels,
            blocks: [block1, block2],
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn rows(&self) -> impl Iterator<Item = (Tap, &Row)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(b, rows)| rows.iter().enumerate().map(move |(r, row)| (Tap { block: b + 1, row: r }, row)))
    }

    pub fn bnecks(&self) -> impl Iterator<Item = &Bneck> {
        self.rows().filter_map(|(_, r)| match r {
            Row::Bneck(b) => Some(b),
            Row::Conv { .. } => None,
        })
    }

    /// Channel count produced at `tap`.
    pub fn channels_at(&self, tap: Tap) -> Result<usize> {
        self.rows()
            .find(|(t, _)| *t == tap)
            .map(|(_, r)| match r {
                Row::Conv { spec, .. } => spec.out_channels,
                Row::Bneck(b) => b.spec.out_channels,
            })
            .ok_or_else(|| Error::Config(format!("no encoder row at block {} row {}", tap.block, tap.row)))
    }

    pub fn deep_channels(&self) -> usize {
        match self.blocks[1].last() {
            Some(Row::Conv { spec, .. }) => spec.out_channels,
            _ => unreachable!("block 2 ends with the 1x1 conv"),
        }
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        for (_, row) in self.rows() {
            match row {
                Row::Conv { prefix, spec, .. } => {
                    store.init_conv(prefix, spec, seed)?;
                    store.init_bn(prefix, spec.out_channels)?;
                }
                Row::Bneck(b) => b.init(store, seed)?,
            }
        }
        Ok(())
    }

    fn check_input(&self, shape: Shape4) -> Result<()> {
        if shape.c != self.in_channels {
            return Err(Error::Dimension {
                op: "backbone",
                axis: crate::error::Axis::Channels,
                expected: self.in_channels,
                actual: shape.c,
            });
        }
        if shape.h % 16 != 0 || shape.w % 16 != 0 {
            return Err(Error::Config(format!(
                "input spatial size {}x{} must be divisible by 16",
                shape.h, shape.w
            )));
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var, skip: Option<Tap>) -> Result<BackboneOutputs> {
        self.check_input(s.graph.shape(x))?;
        let mut h = x;
        let mut skip_var = None;
        for (tap, row) in self.rows() {
            h = match row {
                Row::Conv { prefix, spec, act } => s.conv_bn_act(prefix, h, spec, true, Some(*act))?,
                Row::Bneck(b) => b.forward(s, h)?,
            };
            if Some(tap) == skip {
                skip_var = Some(h);
            }
        }
        if skip.is_some() && skip_var.is_none() {
            return Err(Error::Config("skip tap does not name an encoder row".into()));
        }
        Ok(BackboneOutputs { skip: skip_var, deep: h })
    }

    /// Static trace; returns (skip shape, deep shape) for `skip`.
    pub fn trace(&self, t: &mut Trace, input: Shape4, skip: Option<Tap>) -> Result<(Option<Shape4>, Shape4)> {
        self.check_input(input)?;
        let mut shape = input;
        let mut skip_shape = None;
        for (tap, row) in self.rows() {
            shape = match row {
                Row::Conv { prefix, spec, act } => t.conv(prefix, spec, shape, true, Some(*act))?,
                Row::Bneck(b) => b.trace(t, shape)?,
            };
            if Some(tap) == skip {
                skip_shape = Some(shape);
            }
        }
        Ok((skip_shape, shape))
    }

    /// Per-row layout with input and output shapes, in table order.
    pub fn row_trace(&self, input: Shape4) -> Result<Vec<RowTrace>> {
        self.check_input(input)?;
        let mut out = Vec::new();
        let mut shape = input;
        for (tap, row) in self.rows() {
            let mut scratch = Trace::default();
            let next = match row {
                Row::Conv { prefix, spec, act } => scratch.conv(prefix, spec, shape, true, Some(*act))?,
                Row::Bneck(b) => b.trace(&mut scratch, shape)?,
            };
            out.push(match row {
                Row::Conv { spec, act, .. } => RowTrace {
                    block: tap.block,
                    row: tap.row,
                    module: format!("Conv {}x{}", spec.kernel.0, spec.kernel.1),
                    expansion: None,
                    out_channels: spec.out_channels,
                    use_se: false,
                    nonlinearity: *act,
                    stride: spec.stride,
                    dilation: spec.dilation,
                    input: shape,
                    output: next,
                },
                Row::Bneck(b) => RowTrace {
                    block: tap.block,
                    row: tap.row,
                    module: format!("Bneck {}x{}", b.spec.kernel, b.spec.kernel),
                    expansion: Some(b.spec.expansion),
                    out_channels: b.spec.out_channels,
                    use_se: b.spec.use_se,
                    nonlinearity: b.spec.nonlinearity,
                    stride: b.spec.stride,
                    dilation: b.spec.dilation,
                    input: shape,
                    output: next,
                },
            });
            shape = next;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_param_count_within_one_percent() {
        let b = Backbone::new(4, 1.0).unwrap();
        let mut store = ParamStore::<f32>::new();
        b.init(&mut store, 0).unwrap();
        let n = store.trainable_count("block");
        assert_eq!(n, 2_972_384);
        assert!((n as f64 / 2.975e6 - 1.0).abs() < 0.01);
        let mut t = Trace::default();
        b.trace(&mut t, Shape4::new(1, 4, 512, 512), None).unwrap();
        assert_eq!(t.params(), n);
    }

    #[test]
    fn taps_and_scaling() {
        let b = Backbone::new(4, 1.0).unwrap();
        let mut t = Trace::default();
        let (skip, deep) = b.trace(&mut t, Shape4::new(1, 4, 512, 512), Some(TAP_BLOCK1_64)).unwrap();
        assert_eq!(skip, Some(Shape4::new(1, 40, 64, 64)));
        assert_eq!(deep, Shape4::new(1, 960, 32, 32));
        let (skip, deep) = b.trace(&mut t, Shape4::new(1, 4, 256, 256), Some(TAP_BLOCK1_128)).unwrap();
        assert_eq!(skip, Some(Shape4::new(1, 24, 64, 64)));
        assert_eq!(deep, Shape4::new(1, 960, 16, 16));
        assert!(b.trace(&mut t, Shape4::new(1, 4, 100, 96), None).is_err());
        assert!(b.trace(&mut t, Shape4::new(1, 3, 64, 64), None).is_err());
    }

    #[test]
    fn residual_rule_over_every_row() {
        let b = Backbone::new(4, 1.0).unwrap();
        let with_residual: Vec<bool> = b.bnecks().map(|x| x.has_residual()).collect();
        assert_eq!(
            with_residual,
            vec![true, false, true, false, true, true, false, true, true, true, false, true, false, true, true]
        );
        for x in b.bnecks() {
            assert_eq!(x.has_residual(), x.spec.stride == 1 && x.in_channels == x.spec.out_channels);
        }
    }

    #[test]
    fn se_widths() {
        assert_eq!(se_channels(72), 24);
        assert_eq!(se_channels(120), 32);
        assert_eq!(se_channels(960), 240);
    }

    #[test]
    fn width_multiplier_keeps_divisible_channels() {
        let b = Backbone::new(4, 0.25).unwrap();
        assert_eq!(b.deep_channels(), 240);
        assert_eq!(b.channels_at(TAP_BLOCK1_64).unwrap(), 16);
    }
}

//! Dual atrous separable convolution: an atrous conv `f_a` in parallel with
//! a depthwise atrous conv `f_da` followed by a pointwise conv `f_p`, the two
//! branch outputs concatenated along channels as `(f_a, f_p(f_da))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{ParamStore, Session, Trace};
use crate::ops::{Activation, ConvSpec};
use crate::tensor::{Element, Shape4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DasVariant {
    /// Plain atrous conv only.
    #[serde(rename = "f_a")]
    Atrous,
    /// Depthwise atrous conv followed by a pointwise conv.
    #[serde(rename = "f_da_p")]
    AtrousSeparable,
    /// Both, concatenated.
    #[serde(rename = "f_das")]
    Dual,
}

impl DasVariant {
    pub fn label(self) -> &'static str {
        match self {
            DasVariant::Atrous => "f_a",
            DasVariant::AtrousSeparable => "f_da_p",
            DasVariant::Dual => "f_das",
        }
    }

    fn has_atrous(self) -> bool {
        matches!(self, DasVariant::Atrous | DasVariant::Dual)
    }

    fn has_separable(self) -> bool {
        matches!(self, DasVariant::AtrousSeparable | DasVariant::Dual)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DasConvConfig {
    pub in_channels: usize,
    pub branch_out_channels: usize,
    pub dilation: usize,
    pub kernel: usize,
    pub variant: DasVariant,
}

impl DasConvConfig {
    /// Branch width of one tenth of the input channels, 3x3 kernel.
    pub fn tenth(in_channels: usize, dilation: usize, variant: DasVariant) -> Result<Self> {
        if in_channels % 10 != 0 || in_channels == 0 {
            return Err(Error::Config(format!(
                "DAS-Conv branch width defaults to in_channels/10, but {in_channels} is not a \
                 positive multiple of 10; set the branch channel count explicitly"
            )));
        }
        Ok(Self {
            in_channels,
            branch_out_channels: in_channels / 10,
            dilation,
            kernel: 3,
            variant,
        })
    }

    pub fn with_branch_channels(mut self, channels: usize) -> Self {
        self.branch_out_channels = channels;
        self
    }

    pub fn out_channels(&self) -> usize {
        match self.variant {
            DasVariant::Dual => 2 * self.branch_out_channels,
            _ => self.branch_out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.in_channels == 0 || self.branch_out_channels == 0 {
            problems.push("DAS-Conv channel counts must be >= 1".to_string());
        }
        if self.dilation == 0 {
            problems.push("DAS-Conv dilation must be >= 1".to_string());
        }
        if ![1, 3, 5].contains(&self.kernel) {
            problems.push(format!("DAS-Conv kernel must be 1, 3 or 5, got {}", self.kernel));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigViolations(problems))
        }
    }

    pub fn atrous_spec(&self) -> ConvSpec {
        ConvSpec::same(self.in_channels, self.branch_out_channels, self.kernel, self.dilation)
    }

    pub fn depthwise_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.in_channels, self.kernel, 1, self.dilation)
    }

    pub fn pointwise_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.in_channels, self.branch_out_channels)
    }

    /// Trainable parameters: conv weights plus BN affine terms after `f_a`
    /// and after `f_p`.
    pub fn param_count(&self) -> usize {
        let bn = 2 * self.branch_out_channels;
        let mut n = 0;
        if self.variant.has_atrous() {
            n += self.atrous_spec().param_count() + bn;
        }
        if self.variant.has_separable() {
            n += self.depthwise_spec().param_count() + self.pointwise_spec().param_count() + bn;
        }
        n
    }
}

/// A DAS-Conv block whose parameters live under `prefix`.
#[derive(Debug, Clone)]
pub struct DasConv {
    pub prefix: String,
    pub cfg: DasConvConfig,
}

impl DasConv {
    pub fn new(prefix: impl Into<String>, cfg: DasConvConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            prefix: prefix.into(),
            cfg,
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        if self.cfg.variant.has_atrous() {
            store.init_conv(&self.name("fa"), &self.cfg.atrous_spec(), seed)?;
            store.init_bn(&self.name("fa"), self.cfg.branch_out_channels)?;
        }
        if self.cfg.variant.has_separable() {
            store.init_conv(&self.name("fda"), &self.cfg.depthwise_spec(), seed)?;
            store.init_conv(&self.name("fp"), &self.cfg.pointwise_spec(), seed)?;
            store.init_bn(&self.name("fp"), self.cfg.branch_out_channels)?;
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let relu = Some(Activation::Relu);
        let mut outs = Vec::with_capacity(2);
        if self.cfg.variant.has_atrous() {
            outs.push(s.conv_bn_act(&self.name("fa"), x, &self.cfg.atrous_spec(), true, relu)?);
        }
        if self.cfg.variant.has_separable() {
            let d = s.conv_bn_act(&self.name("fda"), x, &self.cfg.depthwise_spec(), false, None)?;
            outs.push(s.conv_bn_act(&self.name("fp"), d, &self.cfg.pointwise_spec(), true, relu)?);
        }
        match outs.as_slice() {
            [one] => Ok(*one),
            _ => s.graph.concat_channels(&outs),
        }
    }

    pub fn trace(&self, t: &mut Trace, input: Shape4) -> Result<Shape4> {
        let relu = Some(Activation::Relu);
        let mut channels = 0;
        let mut out = input;
        if self.cfg.variant.has_atrous() {
            out = t.conv(&self.name("fa"), &self.cfg.atrous_spec(), input, true, relu)?;
            channels += out.c;
        }
        if self.cfg.variant.has_separable() {
            let d = t.conv(&self.name("fda"), &self.cfg.depthwise_spec(), input, false, None)?;
            out = t.conv(&self.name("fp"), &self.cfg.pointwise_spec(), d, true, relu)?;
            channels += out.c;
        }
        Ok(Shape4::new(out.n, channels, out.h, out.w))
    }
}

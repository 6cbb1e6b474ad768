//! Segmentation head: 1x1 projection, dropout, separable 3x3 conv, upsample
//! to the skip resolution, skip concat, class projection, upsample to the
//! input resolution.

use serde::{Deserialize, Serialize};

use crate::error::{Axis, Error, Result};
use crate::graph::Var;
use crate::nn::{ParamStore, Session, Trace};
use crate::ops::{Activation, ConvSpec};
use crate::tensor::{Element, Shape4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub proj_channels: usize,
    pub dropout_rate: f64,
    /// Channels of the skip tensor; 0 when there is no skip connection.
    pub skip_channels: usize,
    pub num_classes: usize,
    pub sep_kernel: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            proj_channels: 256,
            dropout_rate: 0.5,
            skip_channels: 40,
            num_classes: 9,
            sep_kernel: 3,
        }
    }
}

impl HeadConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_classes < 2 {
            v.push(format!("head.num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_classes > 256 {
            v.push(format!("head.num_classes must fit in 8 bits, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            v.push(format!("head.dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.proj_channels == 0 {
            v.push("head.proj_channels must be >= 1".into());
        }
        if ![1, 3, 5].contains(&self.sep_kernel) {
            v.push(format!("head.sep_kernel must be 1, 3 or 5, got {}", self.sep_kernel));
        }
        v
    }
}

const DROPOUT_SALT: u64 = 0xD0;

#[derive(Debug, Clone)]
pub struct Head {
    pub cfg: HeadConfig,
    in_channels: usize,
    proj: ConvSpec,
    sep_dw: ConvSpec,
    sep_pw: ConvSpec,
    cls: ConvSpec,
}

impl Head {
    pub fn new(in_channels: usize, cfg: HeadConfig) -> Result<Self> {
        let v = cfg.violations();
        if !v.is_empty() {
            return Err(Error::ConfigViolations(v));
        }
        let p = cfg.proj_channels;
        Ok(Self {
            in_channels,
            proj: ConvSpec::pointwise(in_channels, p),
            sep_dw: ConvSpec::depthwise(p, cfg.sep_kernel, 1, 1),
            sep_pw: ConvSpec::pointwise(p, p),
            cls: ConvSpec::pointwise(p + cfg.skip_channels, cfg.num_classes).with_bias(true),
            cfg,
        })
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        store.init_conv("head.proj", &self.proj, seed)?;
        store.init_bn("head.proj", self.cfg.proj_channels)?;
        store.init_conv("head.sep_dw", &self.sep_dw, seed)?;
        store.init_conv("head.sep_pw", &self.sep_pw, seed)?;
        store.init_bn("head.sep_pw", self.cfg.proj_channels)?;
        store.init_conv("head.cls", &self.cls, seed)
    }

    /// Spatial size the decoder features are upsampled to before fusion.
    fn fusion_hw(&self, aspp: Shape4, skip: Option<Shape4>) -> Result<(usize, usize)> {
        match skip {
            None => Ok((aspp.h, aspp.w)),
            Some(s) => {
                crate::error::check_dim("head.skip", Axis::Batch, aspp.n, s.n)?;
                crate::error::check_dim("head.skip", Axis::Channels, self.cfg.skip_channels, s.c)?;
                if s.h % aspp.h != 0 || s.w % aspp.w != 0 || s.h / aspp.h != s.w / aspp.w {
                    return Err(Error::Dimension {
                        op: "head.skip",
                        axis: Axis::Height,
                        expected: aspp.h,
                        actual: s.h,
                    });
                }
                Ok((s.h, s.w))
            }
        }
    }

    fn check(&self, aspp: Shape4, skip: Option<Shape4>) -> Result<(usize, usize)> {
        crate::error::check_dim("head", Axis::Channels, self.in_channels, aspp.c)?;
        if skip.is_none() && self.cfg.skip_channels != 0 {
            return Err(Error::Config("head expects a skip tensor but none was given".into()));
        }
        self.fusion_hw(aspp, skip)
    }

    pub fn forward<T: Element>(
        &self,
        s: &mut Session<'_, T>,
        aspp: Var,
        skip: Option<Var>,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let fuse_hw = self.check(s.graph.shape(aspp), skip.map(|v| s.graph.shape(v)))?;
        let relu = Some(Activation::Relu);
        let mut h = s.conv_bn_act("head.proj", aspp, &self.proj, true, relu)?;
        h = s.dropout(h, self.cfg.dropout_rate, DROPOUT_SALT)?;
        h = s.conv_bn_act("head.sep_dw", h, &self.sep_dw, false, None)?;
        h = s.conv_bn_act("head.sep_pw", h, &self.sep_pw, true, relu)?;
        if fuse_hw != (s.graph.shape(h).h, s.graph.shape(h).w) {
            h = s.graph.bilinear_resize(h, fuse_hw, false)?;
        }
        if let Some(k) = skip {
            h = s.graph.concat_channels(&[h, k])?;
        }
        let logits = s.conv_bn_act("head.cls", h, &self.cls, false, None)?;
        if out_hw == fuse_hw {
            Ok(logits)
        } else {
            s.graph.bilinear_resize(logits, out_hw, false)
        }
    }

    pub fn trace(&self, t: &mut Trace, aspp: Shape4, skip: Option<Shape4>, out_hw: (usize, usize)) -> Result<Shape4> {
        let fuse_hw = self.check(aspp, skip)?;
        let relu = Some(Activation::Relu);
        let mut h = t.conv("head.proj", &self.proj, aspp, true, relu)?;
        t.elementwise("head.dropout", "dropout", h, h, 1);
        h = t.conv("head.sep_dw", &self.sep_dw, h, false, None)?;
        h = t.conv("head.sep_pw", &self.sep_pw, h, true, relu)?;
        if fuse_hw != (h.h, h.w) {
            let up = Shape4::new(h.n, h.c, fuse_hw.0, fuse_hw.1);
            t.elementwise("head.upsample1", "bilinear_resize", h, up, 4);
            h = up;
        }
        if let Some(k) = skip {
            let cat = Shape4::new(h.n, h.c + k.c, h.h, h.w);
            t.elementwise("head.concat", "concat_channels", cat, cat, 0);
            h = cat;
        }
        let logits = t.conv("head.cls", &self.cls, h, false, None)?;
        if out_hw == fuse_hw {
            return Ok(logits);
        }
        let up = Shape4::new(logits.n, logits.c, out_hw.0, out_hw.1);
        t.elementwise("head.upsample2", "bilinear_resize", logits, up, 4);
        Ok(up)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_shapes_and_params() {
        let head = Head::new(1280, HeadConfig::default()).unwrap();
        let mut store = ParamStore::<f32>::new();
        head.init(&mut store, 0).unwrap();
        assert_eq!(store.trainable_count("head."), 399_217);
        let mut t = Trace::default();
        let out = head
            .trace(&mut t, Shape4::new(1, 1280, 32, 32), Some(Shape4::new(1, 40, 64, 64)), (512, 512))
            .unwrap();
        assert_eq!(out, Shape4::new(1, 9, 512, 512));
        let cat = t.layers.iter().find(|l| l.name == "head.concat").unwrap();
        assert_eq!(cat.output.c, 296);
        assert_eq!(t.params(), 399_217);
    }

    #[test]
    fn class_count_touches_only_the_class_projection() {
        let a = Head::new(1280, HeadConfig::default()).unwrap();
        let b = Head::new(1280, HeadConfig { num_classes: 5, ..HeadConfig::default() }).unwrap();
        let trace = |h: &Head| {
            let mut t = Trace::default();
            h.trace(&mut t, Shape4::new(1, 1280, 4, 4), Some(Shape4::new(1, 40, 8, 8)), (64, 64))
                .unwrap();
            t.layers
        };
        let (la, lb) = (trace(&a), trace(&b));
        for (x, y) in la.iter().zip(&lb) {
            assert_eq!(x.params == y.params, x.name != "head.cls", "{}", x.name);
        }
        assert_eq!(la.iter().find(|l| l.name == "head.cls").unwrap().params, 296 * 9 + 9);
    }

    #[test]
    fn rejects_bad_skip_geometry() {
        let head = Head::new(1280, HeadConfig::default()).unwrap();
        let mut t = Trace::default();
        assert!(head
            .trace(&mut t, Shape4::new(1, 1280, 32, 32), Some(Shape4::new(1, 40, 48, 48)), (512, 512))
            .is_err());
        assert!(head
            .trace(&mut t, Shape4::new(1, 1280, 32, 32), Some(Shape4::new(1, 24, 64, 64)), (512, 512))
            .is_err());
        assert!(head.trace(&mut t, Shape4::new(1, 1280, 32, 32), None, (512, 512)).is_err());
        assert!(Head::new(8, HeadConfig { dropout_rate: 1.0, num_classes: 1, ..HeadConfig::default() }).is_err());
    }
}

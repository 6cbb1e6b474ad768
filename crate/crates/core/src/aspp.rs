//! Atrous spatial pyramid pooling with DAS-Conv paths: a 1x1 conv, one
//! DAS-Conv per dilation rate and an image-pooling path, concatenated.

use serde::Serialize;

use crate::das_conv::{DasConv, DasConvConfig, DasVariant};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{ParamStore, Session, Trace};
use crate::ops::{Activation, ConvSpec};
use crate::tensor::{Element, Shape4};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsppConfig {
    pub in_channels: usize,
    pub p1_out: usize,
    pub dilation_set: Vec<usize>,
    pub pool_out: usize,
    pub das_variant: DasVariant,
    /// Per-branch DAS width; `None` means `in_channels / 10`.
    pub das_branch_channels: Option<usize>,
}

impl Default for AsppConfig {
    fn default() -> Self {
        Self {
            in_channels: 960,
            p1_out: 256,
            dilation_set: vec![4, 8, 12, 24],
            pool_out: 256,
            das_variant: DasVariant::Dual,
            das_branch_channels: None,
        }
    }
}

impl AsppConfig {
    pub fn das_config(&self, dilation: usize) -> Result<DasConvConfig> {
        let cfg = match self.das_branch_channels {
            Some(b) => DasConvConfig {
                in_channels: self.in_channels,
                branch_out_channels: b,
                dilation,
                kernel: 3,
                variant: self.das_variant,
            },
            None => DasConvConfig::tenth(self.in_channels, dilation, self.das_variant)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Collects every violation. Dilation rates must be distinct and >= 1;
    /// their order fixes the order of the output channel blocks.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.in_channels == 0 || self.p1_out == 0 || self.pool_out == 0 {
            v.push("ASPP channel counts must be >= 1".to_string());
        }
        if self.dilation_set.is_empty() {
            v.push("dilation_set must not be empty".to_string());
        }
        if self.dilation_set.contains(&0) {
            v.push("dilation rates must be >= 1".to_string());
        }
        let mut sorted = self.dilation_set.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.dilation_set.len() {
            v.push(format!("dilation_set {:?} repeats a rate", self.dilation_set));
        }
        if self.in_channels > 0 {
            if let Err(e) = self.das_config(1) {
                v.push(e.to_string());
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations() {
            v if v.is_empty() => Ok(()),
            v => Err(Error::ConfigViolations(v)),
        }
    }

    pub fn das_out_channels(&self) -> Result<usize> {
        Ok(self.das_config(1)?.out_channels())
    }

    pub fn out_channels(&self) -> Result<usize> {
        Ok(self.p1_out + self.dilation_set.len() * self.das_out_channels()? + self.pool_out)
    }
}

/// One row of the per-path layout table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AsppRow {
    pub path: String,
    pub input: Shape4,
    pub module: String,
    pub dilation: Option<usize>,
    pub output: Shape4,
}

#[derive(Debug, Clone)]
pub struct Aspp {
    pub cfg: AsppConfig,
    p1: ConvSpec,
    das: Vec<DasConv>,
    pool: ConvSpec,
}

fn path_name(k: usize) -> String {
    format!("aspp.p{k}")
}

impl Aspp {
    pub fn new(cfg: AsppConfig) -> Result<Self> {
        cfg.validate()?;
        let das = cfg
            .dilation_set
            .iter()
            .enumerate()
            .map(|(i, &d)| DasConv::new(path_name(i + 2), cfg.das_config(d)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            p1: ConvSpec::pointwise(cfg.in_channels, cfg.p1_out),
            pool: ConvSpec::pointwise(cfg.in_channels, cfg.pool_out),
            das,
            cfg,
        })
    }

    fn pool_index(&self) -> usize {
        self.das.len() + 2
    }

    pub fn out_channels(&self) -> usize {
        self.cfg.p1_out + self.das.iter().map(|d| d.cfg.out_channels()).sum::<usize>() + self.cfg.pool_out
    }

    pub fn init<T: Element>(&self, store: &mut ParamStore<T>, seed: u64) -> Result<()> {
        store.init_conv(&path_name(1), &self.p1, seed)?;
        store.init_bn(&path_name(1), self.cfg.p1_out)?;
        for d in &self.das {
            d.init(store, seed)?;
        }
        let pool = path_name(self.pool_index());
        store.init_conv(&pool, &self.pool, seed)?;
        store.init_bn(&pool, self.cfg.pool_out)
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, deep: Var) -> Result<Var> {
        let shape = s.graph.shape(deep);
        let relu = Some(Activation::Relu);
        let mut paths = vec![s.conv_bn_act(&path_name(1), deep, &self.p1, true, relu)?];
        for d in &self.das {
            paths.push(d.forward(s, deep)?);
        }
        let pooled = s.graph.global_avg_pool(deep);
        let p = s.conv_bn_act(&path_name(self.pool_index()), pooled, &self.pool, true, relu)?;
        paths.push(s.graph.bilinear_resize(p, (shape.h, shape.w), false)?);
        s.graph.concat_channels(&paths)
    }

    pub fn trace(&self, t: &mut Trace, input: Shape4) -> Result<Shape4> {
        let relu = Some(Activation::Relu);
        let mut c = t.conv(&path_name(1), &self.p1, input, true, relu)?.c;
        for d in &self.das {
            c += d.trace(t, input)?.c;
        }
        let pool = path_name(self.pool_index());
        let pooled = Shape4::new(input.n, input.c, 1, 1);
        t.elementwise(&format!("{pool}.avgpool"), "global_avg_pool", input, pooled, 1);
        let p = t.conv(&pool, &self.pool, pooled, true, relu)?;
        let up = Shape4::new(p.n, p.c, input.h, input.w);
        t.elementwise(&format!("{pool}.resize"), "bilinear_resize", p, up, 4);
        c += up.c;
        let out = Shape4::new(input.n, c, input.h, input.w);
        t.elementwise("aspp.concat", "concat_channels", out, out, 0);
        Ok(out)
    }

    /// The per-path Input/Module/DR/Output table for a single image.
    pub fn shape_trace(&self, hw: (usize, usize)) -> Result<Vec<AsppRow>> {
        let input = Shape4::new(1, self.cfg.in_channels, hw.0, hw.1);
        let mut rows = Vec::new();
        let mut t = Trace::default();
        let p1 = t.conv("p1", &self.p1, input, true, None)?;
        rows.push(AsppRow {
            path: "P1".into(),
            input,
            module: "Conv 1x1".into(),
            dilation: None,
            output: p1,
        });
        for (i, d) in self.das.iter().enumerate() {
            let out = d.trace(&mut t, input)?;
            let module = match d.cfg.variant {
                DasVariant::Dual => "DASConv",
                DasVariant::AtrousSeparable => "AtrousSepConv",
                DasVariant::Atrous => "AtrousConv",
            };
            rows.push(AsppRow {
                path: format!("P{}", i + 2),
                input,
                module: format!("{module} {0}x{0}", d.cfg.kernel),
                dilation: Some(d.cfg.dilation),
                output: out,
            });
        }
        let k = self.pool_index();
        let pooled = Shape4::new(1, input.c, 1, 1);
        let conv = t.conv("pool", &self.pool, pooled, true, None)?;
        let up = Shape4::new(1, conv.c, hw.0, hw.1);
        for (module, i, o) in [("AvgPool 1x1", input, pooled), ("Conv 1x1", pooled, conv), ("Bilinear", conv, up)] {
            rows.push(AsppRow {
                path: format!("P{k}"),
                input: i,
                module: module.into(),
                dilation: None,
                output: o,
            });
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Mode;
    use crate::tensor::Tensor4;

    #[test]
    fn default_params_and_width() {
        let aspp = Aspp::new(AsppConfig::default()).unwrap();
        assert_eq!(aspp.out_channels(), 1280);
        let mut store = ParamStore::<f32>::new();
        aspp.init(&mut store, 0).unwrap();
        assert_eq!(store.trainable_count("aspp."), 4_215_040);
        let mut t = Trace::default();
        let out = aspp.trace(&mut t, Shape4::new(1, 960, 32, 32)).unwrap();
        assert_eq!(out, Shape4::new(1, 1280, 32, 32));
        assert_eq!(t.params(), 4_215_040);
    }

    #[test]
    fn shape_trace_rows() {
        let aspp = Aspp::new(AsppConfig::default()).unwrap();
        let rows = aspp.shape_trace((32, 32)).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[1].module, "DASConv 3x3");
        assert_eq!(rows[1].dilation, Some(4));
        assert_eq!(rows[1].output, Shape4::new(1, 192, 32, 32));
        assert_eq!(rows[7].output, Shape4::new(1, 256, 32, 32));
        let small = aspp.shape_trace((16, 16)).unwrap();
        assert_eq!(small[7].output, Shape4::new(1, 256, 16, 16));
        let cfg = AsppConfig {
            dilation_set: vec![12, 24, 32],
            ..AsppConfig::default()
        };
        let rows = Aspp::new(cfg).unwrap().shape_trace((32, 32)).unwrap();
        assert_eq!(rows.iter().filter(|r| r.dilation.is_some()).count(), 3);
    }

    #[test]
    fn invalid_configs_list_every_problem() {
        let cfg = AsppConfig {
            in_channels: 25,
            dilation_set: vec![4, 4, 0],
            ..AsppConfig::default()
        };
        match cfg.validate() {
            Err(Error::ConfigViolations(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pool_path_of_constant_input_is_constant() {
        let cfg = AsppConfig {
            in_channels: 20,
            p1_out: 4,
            pool_out: 3,
            dilation_set: vec![1, 2],
            ..AsppConfig::default()
        };
        let aspp = Aspp::new(cfg).unwrap();
        let mut store = ParamStore::<f64>::new();
        aspp.init(&mut store, 4).unwrap();
        let mut s = Session::new(&store, Mode::Eval, false, 0);
        let x = s.input(Tensor4::from_fn(Shape4::new(1, 20, 8, 8), |_, c, _, _| c as f64 * 0.1));
        let y = aspp.forward(&mut s, x).unwrap();
        let y = s.graph.value(y);
        assert_eq!(y.shape(), Shape4::new(1, 4 + 2 * 4 + 3, 8, 8));
        for c in 12..15 {
            let p = y.plane(0, c);
            assert!(p.iter().all(|&v| v == p[0]));
        }
    }
}

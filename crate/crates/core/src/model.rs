//! Declarative model configuration, presets for the explored design space,
//! model building, inference and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aspp::{Aspp, AsppConfig};
use crate::backbone::{scale_channels, Backbone, Tap, TAP_BLOCK1_128, TAP_BLOCK1_64};
use crate::das_conv::DasVariant;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::head::{Head, HeadConfig};
use crate::nn::{ParamStore, Session, Trace};
use crate::ops::{self, LabelMap, Mode};
use crate::tensor::{Element, Shape4, Tensor4};

/// Which encoder feature map feeds the decoder's skip connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipSource {
    None,
    /// Block-1 output (64x64x40 at 512x512).
    #[serde(rename = "block1_64")]
    Block1At64,
    /// 24-channel block-1 features (128x128x24 at 512x512).
    #[serde(rename = "block1_128")]
    Block1At128,
    /// The deep features themselves (32x32x960 at 512x512).
    #[serde(rename = "deep_32")]
    Deep32,
}

impl SkipSource {
    pub fn label(self) -> &'static str {
        match self {
            SkipSource::None => "none",
            SkipSource::Block1At64 => "block1_64",
            SkipSource::Block1At128 => "block1_128",
            SkipSource::Deep32 => "deep_32",
        }
    }

    fn tap(self) -> Option<Tap> {
        match self {
            SkipSource::Block1At64 => Some(TAP_BLOCK1_64),
            SkipSource::Block1At128 => Some(TAP_BLOCK1_128),
            SkipSource::None | SkipSource::Deep32 => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub dilation_set: Vec<usize>,
    pub das_variant: DasVariant,
    pub skip_source: SkipSource,
    pub num_classes: usize,
    pub head: HeadConfig,
    pub seed: u64,
    /// Channel multiplier applied to the encoder and decoder widths.
    pub width_multiplier: f64,
    /// Overrides the one-tenth DAS branch width.
    pub das_branch_channels: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 4,
            input_hw: (512, 512),
            dilation_set: vec![4, 8, 12, 24],
            das_variant: DasVariant::Dual,
            skip_source: SkipSource::Block1At64,
            num_classes: 9,
            head: HeadConfig::default(),
            seed: 0,
            width_multiplier: 1.0,
            das_branch_channels: None,
        }
    }
}

/// Branch width of the DeepLabV3 ASPP, used for the single-function
/// (`f_a`, `f_da_p`) rows of the exploration table.
pub const WIDE_BRANCH_CHANNELS: usize = 256;

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Same architecture with every width scaled; head fields follow.
    pub fn with_width(mut self, width: f64) -> Self {
        self.width_multiplier = width;
        self.head.proj_channels = scale_channels(256, width);
        if let Ok(b) = Backbone::new(self.input_channels, width) {
            self.head.skip_channels = skip_channels(&b, self.skip_source);
        }
        self
    }

    fn aspp_config(&self, deep_channels: usize) -> AsppConfig {
        AsppConfig {
            in_channels: deep_channels,
            p1_out: scale_channels(256, self.width_multiplier),
            dilation_set: self.dilation_set.clone(),
            pool_out: scale_channels(256, self.width_multiplier),
            das_variant: self.das_variant,
            das_branch_channels: self.das_branch_channels,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.input_channels == 0 {
            v.push("input_channels must be >= 1".into());
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            v.push(format!("input_hw {h}x{w} must be positive multiples of 16"));
        }
        if self.dilation_set.windows(2).any(|p| p[0] >= p[1]) {
            v.push(format!("dilation_set {:?} must be strictly increasing", self.dilation_set));
        }
        if self.num_classes != self.head.num_classes {
            v.push(format!(
                "num_classes ({}) and head.num_classes ({}) disagree",
                self.num_classes, self.head.num_classes
            ));
        }
        v.extend(self.head.violations());
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 4.0) {
            v.push(format!("width_multiplier must lie in (0, 4], got {}", self.width_multiplier));
            return v;
        }
        if self.das_branch_channels == Some(0) {
            v.push("das_branch_channels must be >= 1".into());
        }
        if let Ok(b) = Backbone::new(self.input_channels.max(1), self.width_multiplier) {
            let expect = skip_channels(&b, self.skip_source);
            if self.head.skip_channels != expect {
                v.push(format!(
                    "head.skip_channels is {} but skip_source {} provides {expect} channels",
                    self.head.skip_channels,
                    self.skip_source.label()
                ));
            }
            v.extend(self.aspp_config(b.deep_channels()).violations());
        }
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations() {
            v if v.is_empty() => Ok(()),
            v => Err(Error::ConfigViolations(v)),
        }
    }
}

fn skip_channels(b: &Backbone, source: SkipSource) -> usize {
    match source {
        SkipSource::None => 0,
        SkipSource::Deep32 => b.deep_channels(),
        other => b.channels_at(other.tap().expect("tap")).expect("tap exists"),
    }
}

/// One row of the model-building exploration table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplorationRow {
    pub stage: u8,
    pub model: &'static str,
    pub skip: &'static str,
    pub f_beta: &'static str,
    pub published_params_m: f64,
    pub published_gflops: f64,
}

const fn xrow(stage: u8, model: &'static str, skip: &'static str, f_beta: &'static str, p: f64, g: f64) -> ExplorationRow {
    ExplorationRow {
        stage,
        model,
        skip,
        f_beta,
        published_params_m: p,
        published_gflops: g,
    }
}

/// The seventeen exploration rows; only their (skip, f_beta) pairs are
/// realised here, always on the MobileNetV3-Large encoder.
pub const EXPLORATION_ROWS: [ExplorationRow; 17] = [
    xrow(1, "Resnet50 Deeplabv3", "No", "f_a{12,24,32}", 42.0, 163.57),
    xrow(1, "Resnet50 Deeplabv3", "No", "f_a{12,24,32}", 42.0, 163.57),
    xrow(2, "Resnet50 Deeplabv3", "No", "f_a{12,24,32}", 42.0, 163.77),
    xrow(2, "Resnet50 Deeplabv3", "No", "f_a{12,24,32}", 42.0, 163.77),
    xrow(3, "Resnet50 Deeplabv3", "No", "f_a{12,24,32}", 42.0, 163.77),
    xrow(3, "Resnet101 Deeplabv3", "No", "f_a{12,24,32}", 61.0, 241.25),
    xrow(3, "Resnet101 Deeplabv3", "No", "f_a{12,24,32}", 61.0, 241.25),
    xrow(3, "Mobilenetv3L Deeplabv3", "No", "f_a{12,24,32}", 11.0, 9.83),
    xrow(3, "Mobilenetv3L Deeplabv3", "No", "f_a{12,24,32}", 11.0, 9.83),
    xrow(4, "Mobilenetv3L Deeplabv3", "32^2x960", "f_da{12,24,32}", 4.6, 3.29),
    xrow(4, "Mobilenetv3L Deeplabv3", "64^2x40", "f_da{12,24,32}", 4.6, 3.29),
    xrow(4, "Mobilenetv3L Deeplabv3", "128^2x24", "f_da{12,24,32}", 4.6, 3.32),
    xrow(5, "Mobilenetv3L Deeplabv3", "64^2x40", "f_da{12,24,32}", 4.6, 3.29),
    xrow(5, "Mobilenetv3L Deeplabv3", "64^2x40", "f_das{12,24,32}", 7.5, 6.31),
    xrow(5, "Mobilenetv3L Deeplabv3", "64^2x40", "f_das{4,8,12}", 7.5, 6.31),
    xrow(5, "Mobilenetv3L Deeplabv3", "64^2x40", "f_das{4,8,12,24}", 7.6, 6.32),
    xrow(5, "Mobilenetv3L Deeplabv3", "128^2x24", "f_das{4,8,12,24}", 7.6, 6.35),
];

/// Parses a skip label such as `64^2x40` or `No`.
pub fn parse_skip(label: &str) -> Result<SkipSource> {
    match label.trim().replace('×', "x").replace(' ', "").to_ascii_lowercase().as_str() {
        "no" | "none" => Ok(SkipSource::None),
        "32^2x960" => Ok(SkipSource::Deep32),
        "64^2x40" => Ok(SkipSource::Block1At64),
        "128^2x24" => Ok(SkipSource::Block1At128),
        other => Err(Error::Config(format!("unknown skip label {other:?}"))),
    }
}

/// Parses an atrous-function label such as `f_das{4,8,12,24}`.
pub fn parse_f_beta(label: &str) -> Result<(DasVariant, Vec<usize>)> {
    let bad = || Error::Config(format!("malformed atrous-function label {label:?}"));
    let (name, rest) = label.trim().split_once('{').ok_or_else(bad)?;
    let body = rest.strip_suffix('}').ok_or_else(bad)?;
    let variant = match name.trim() {
        "f_a" => DasVariant::Atrous,
        "f_da" | "f_da_p" => DasVariant::AtrousSeparable,
        "f_das" => DasVariant::Dual,
        _ => return Err(bad()),
    };
    let rates = body
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    Ok((variant, rates))
}

impl ExplorationRow {
    pub fn config(&self) -> Result<ModelConfig> {
        let skip = parse_skip(self.skip)?;
        let (variant, rates) = parse_f_beta(self.f_beta)?;
        Ok(preset(skip, variant, rates))
    }
}

/// A configuration for one (skip, atrous function) pair. Single-function
/// variants use the wide 256-channel branches of the original ASPP.
pub fn preset(skip: SkipSource, variant: DasVariant, dilation_set: Vec<usize>) -> ModelConfig {
    let base = ModelConfig {
        skip_source: skip,
        das_variant: variant,
        dilation_set,
        das_branch_channels: (variant != DasVariant::Dual).then_some(WIDE_BRANCH_CHANNELS),
        ..ModelConfig::default()
    };
    base.with_width(1.0)
}

/// Built network: structure plus parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub aspp: Aspp,
    pub head: Head,
    pub params: ParamStore<f32>,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let backbone = Backbone::new(cfg.input_channels, cfg.width_multiplier)?;
    let aspp = Aspp::new(cfg.aspp_config(backbone.deep_channels()))?;
    let head = Head::new(aspp.out_channels(), cfg.head)?;
    let mut params = ParamStore::new();
    backbone.init(&mut params, cfg.seed)?;
    aspp.init(&mut params, cfg.seed)?;
    head.init(&mut params, cfg.seed)?;
    Ok(Model {
        cfg: cfg.clone(),
        backbone,
        aspp,
        head,
        params,
    })
}

/// Prefixes of the three parameter groups.
pub const BACKBONE_PREFIX: &str = "block";
pub const ASPP_PREFIX: &str = "aspp.";
pub const HEAD_PREFIX: &str = "head.";

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.trainable_count("")
    }

    /// Records the full network on `s` and returns the logits.
    pub fn forward_on<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let xs = s.graph.shape(x);
        let feats = self.backbone.forward(s, x, self.cfg.skip_source.tap())?;
        let a = self.aspp.forward(s, feats.deep)?;
        let skip = match self.cfg.skip_source {
            SkipSource::Deep32 => Some(feats.deep),
            _ => feats.skip,
        };
        self.head.forward(s, a, skip, (xs.h, xs.w))
    }

    /// Inference: logits and per-pixel argmax labels.
    pub fn forward(&self, x: &Tensor4<f32>, mode: Mode, seed: u64) -> Result<(Tensor4<f32>, LabelMap)> {
        let mut s = Session::new(&self.params, mode, false, seed);
        let xv = s.input(x.clone());
        let logits = self.forward_on(&mut s, xv)?;
        let logits = s.graph.value(logits).clone();
        let labels = ops::argmax_channels(&ops::softmax_channels(&logits));
        Ok((logits, labels))
    }

    pub fn trace(&self, input: Shape4) -> Result<Trace> {
        let mut t = Trace::default();
        let (skip, deep) = self.backbone.trace(&mut t, input, self.cfg.skip_source.tap())?;
        let a = self.aspp.trace(&mut t, deep)?;
        let skip = match self.cfg.skip_source {
            SkipSource::Deep32 => Some(deep),
            _ => skip,
        };
        self.head.trace(&mut t, a, skip, (input.h, input.w))?;
        Ok(t)
    }

    pub fn input_shape(&self, n: usize) -> Shape4 {
        Shape4::new(n, self.cfg.input_channels, self.cfg.input_hw.0, self.cfg.input_hw.1)
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let json = serde_json::to_string(&self.cfg)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Format("config too large".into()))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(json.as_bytes())?;
        crate::dast::write_table(w, self.params.iter().map(|(n, p)| (n, &p.value)))
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let text = std::str::from_utf8(&json).map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let cfg = ModelConfig::from_json(text)?;
        let mut model = build_model(&cfg)?;
        let mut loaded = ParamStore::new();
        for (name, t) in crate::dast::read_table::<f32>(r)? {
            let kind = model.params.get(&name).map_err(|_| {
                Error::Format(format!("unexpected tensor {name} in checkpoint"))
            })?.kind;
            loaded.insert(name, kind, t)?;
        }
        model.params.load_from(loaded)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_checkpoint(&mut r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_totals() {
        let m = build_model(&ModelConfig::default()).unwrap();
        assert_eq!(m.params.trainable_count(BACKBONE_PREFIX), 2_972_384);
        assert_eq!(m.params.trainable_count(ASPP_PREFIX), 4_215_040);
        assert_eq!(m.params.trainable_count(HEAD_PREFIX), 399_217);
        assert_eq!(m.param_count(), 7_586_641);
        let t = m.trace(m.input_shape(1)).unwrap();
        assert_eq!(t.params(), m.param_count());
        assert_eq!(t.layers.last().unwrap().output, Shape4::new(1, 9, 512, 512));
    }

    #[test]
    fn unknown_keys_and_violations_are_reported() {
        let err = ModelConfig::from_json(r#"{"num_classes": 9, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ModelConfig::from_json(r#"{"num_classes": 5, "dilation_set": [8, 4], "input_hw": [100, 512]}"#)
            .unwrap_err();
        match err {
            Error::ConfigViolations(v) => assert!(v.len() >= 3, "{v:?}"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let cfg = preset(SkipSource::Block1At128, DasVariant::AtrousSeparable, vec![12, 24, 32]);
        let back = ModelConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let text = serde_json::to_value(&cfg).unwrap();
        assert_eq!(text["skip_source"], "block1_128");
        assert_eq!(text["das_variant"], "f_da_p");
    }

    #[test]
    fn labels_parse() {
        assert_eq!(parse_f_beta("f_das{4, 8,12,24}").unwrap(), (DasVariant::Dual, vec![4, 8, 12, 24]));
        assert_eq!(parse_f_beta("f_da{12,24,32}").unwrap().0, DasVariant::AtrousSeparable);
        assert!(parse_f_beta("f_x{1}").is_err());
        assert!(parse_f_beta("f_a{1,}").is_err());
        assert_eq!(parse_skip("128^2×24").unwrap(), SkipSource::Block1At128);
        assert!(parse_skip("16^2x8").is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig {
            input_hw: (32, 32),
            ..ModelConfig::default()
        }
        .with_width(0.25);
        let m = build_model(&cfg).unwrap();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let json_len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
        assert!(std::str::from_utf8(&buf[4..4 + json_len]).unwrap().contains("\"width_multiplier\""));
        let back = Model::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.cfg, m.cfg);
        for ((na, pa), (nb, pb)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.value.data(), pb.value.data());
        }
        assert!(Model::read_checkpoint(&mut &buf[..buf.len() - 1]).is_err());
    }
}

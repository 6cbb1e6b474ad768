//! Parameter and MAC audit with tolerance gates against the published
//! complexity figures.

use serde::Serialize;

use crate::error::Result;
use crate::metrics::effectiveness;
use crate::model::{Model, ModelConfig, ASPP_PREFIX, BACKBONE_PREFIX, HEAD_PREFIX};
use crate::nn::{LayerRecord, Trace};
use crate::tensor::Shape4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStatus {
    Pass,
    Fail,
    NotApplicable,
}

impl GateStatus {
    pub fn label(self) -> &'static str {
        match self {
            GateStatus::Pass => "PASS",
            GateStatus::Fail => "FAIL",
            GateStatus::NotApplicable => "not applicable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gate {
    pub name: String,
    pub reference: f64,
    pub measured: f64,
    /// Relative tolerance, e.g. 0.01 for 1%.
    pub tolerance: f64,
    pub unit: &'static str,
    pub status: GateStatus,
}

impl Gate {
    fn new(name: &str, reference: f64, measured: f64, tolerance: f64, unit: &'static str, applies: bool) -> Self {
        let status = if !applies {
            GateStatus::NotApplicable
        } else if ((measured - reference) / reference).abs() <= tolerance {
            GateStatus::Pass
        } else {
            GateStatus::Fail
        };
        Self {
            name: name.into(),
            reference,
            measured,
            tolerance,
            unit,
            status,
        }
    }

    pub fn deviation(&self) -> f64 {
        (self.measured - self.reference) / self.reference
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
    pub elem_ops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectivenessRow {
    pub diff_miou: f64,
    pub params_millions: f64,
    pub gmacs: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub config: ModelConfig,
    pub input: Shape4,
    /// True when the published figures apply (default config, one
    /// 4x512x512 image).
    pub reference_config: bool,
    pub modules: Vec<ModuleCost>,
    pub total_params: usize,
    pub total_macs: u64,
    pub total_elem_ops: u64,
    pub gates: Vec<Gate>,
    pub effectiveness: Option<EffectivenessRow>,
    pub layers: Vec<LayerRecord>,
}

fn module(trace: &Trace, name: &str, prefixes: &[&str]) -> ModuleCost {
    let rows: Vec<&LayerRecord> = trace
        .layers
        .iter()
        .filter(|l| prefixes.iter().any(|p| l.name.starts_with(p)))
        .collect();
    ModuleCost {
        name: name.into(),
        params: rows.iter().map(|l| l.params).sum(),
        macs: rows.iter().map(|l| l.macs).sum(),
        elem_ops: rows.iter().map(|l| l.elem_ops).sum(),
    }
}

pub const REFERENCE_INPUT: Shape4 = Shape4::new(1, 4, 512, 512);

pub fn audit(model: &Model, input: Shape4) -> Result<AuditReport> {
    let trace = model.trace(input)?;
    let modules = vec![
        module(&trace, "backbone", &[BACKBONE_PREFIX]),
        module(&trace, "aspp", &[ASPP_PREFIX]),
        module(&trace, "head", &[HEAD_PREFIX]),
        module(&trace, "decoder (aspp + head)", &[ASPP_PREFIX, HEAD_PREFIX]),
    ];
    let applies = model.cfg == ModelConfig::default() && input == REFERENCE_INPUT;
    let (bb, dec) = (&modules[0], &modules[3]);
    let gates = vec![
        Gate::new("backbone params", 2.975e6, bb.params as f64, 0.01, "params", applies),
        Gate::new("decoder params", 4.61e6, dec.params as f64, 0.02, "params", applies),
        Gate::new("total params", 7.59e6, trace.params() as f64, 0.03, "params", applies),
        Gate::new("total MACs", 6.32e9, trace.macs() as f64, 0.05, "MACs", applies),
        Gate::new("backbone MACs", 1.84e9, bb.macs as f64, 0.05, "MACs", applies),
    ];
    Ok(AuditReport {
        config: model.cfg.clone(),
        input,
        reference_config: applies,
        total_params: trace.params(),
        total_macs: trace.macs(),
        total_elem_ops: trace.elem_ops(),
        modules,
        gates,
        effectiveness: None,
        layers: trace.layers,
    })
}

fn millions(v: f64) -> String {
    format!("{:.3}M", v / 1e6)
}

fn giga(v: f64) -> String {
    format!("{:.4}G", v / 1e9)
}

impl AuditReport {
    /// False when any applicable gate failed.
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.status != GateStatus::Fail)
    }

    /// Scores the audited model given its mIoU gain in percentage points.
    pub fn with_effectiveness(mut self, diff_miou: f64) -> Result<Self> {
        let p = self.total_params as f64 / 1e6;
        let g = self.total_macs as f64 / 1e9;
        self.effectiveness = Some(EffectivenessRow {
            diff_miou,
            params_millions: p,
            gmacs: g,
            score: effectiveness(diff_miou, p, g)?,
        });
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("input {}\n\n", self.input);
        s.push_str(&format!("{:<24} {:>12} {:>14} {:>14}\n", "module", "params", "conv MACs", "element ops"));
        for m in &self.modules {
            s.push_str(&format!("{:<24} {:>12} {:>14} {:>14}\n", m.name, m.params, m.macs, m.elem_ops));
        }
        s.push_str(&format!(
            "{:<24} {:>12} {:>14} {:>14}\n",
            "total", self.total_params, self.total_macs, self.total_elem_ops
        ));
        s.push_str(&format!(
            "\n{:<16} {:>10} {:>10} {:>9} {:>6}  {}\n",
            "gate", "reference", "measured", "deviation", "tol", "status"
        ));
        for g in &self.gates {
            let fmt = if g.unit == "MACs" { giga } else { millions };
            s.push_str(&format!(
                "{:<16} {:>10} {:>10} {:>+8.2}% {:>5.0}%  {}\n",
                g.name,
                fmt(g.reference),
                fmt(g.measured),
                g.deviation() * 100.0,
                g.tolerance * 100.0,
                g.status.label()
            ));
        }
        if let Some(e) = &self.effectiveness {
            s.push_str(&format!(
                "\neffectiveness {:.2} (diff {} pp, {:.3}M params, {:.4} GMACs)\n",
                e.score, e.diff_miou, e.params_millions, e.gmacs
            ));
        }
        s.push_str(&format!(
            "\n{:<28} {:<26} {:>16} {:>16} {:>9} {:>12} {:>11}\n",
            "layer", "op", "input", "output", "params", "MACs", "elem ops"
        ));
        for l in &self.layers {
            s.push_str(&format!(
                "{:<28} {:<26} {:>16} {:>16} {:>9} {:>12} {:>11}\n",
                l.name,
                l.op,
                l.input.to_string(),
                l.output.to_string(),
                l.params,
                l.macs,
                l.elem_ops
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn default_gates_pass() {
        let m = build_model(&ModelConfig::default()).unwrap();
        let r = audit(&m, REFERENCE_INPUT).unwrap();
        assert!(r.reference_config);
        assert!(r.gates.iter().all(|g| g.status == GateStatus::Pass), "{}", r.to_text());
        assert_eq!(r.modules[0].params + r.modules[3].params, r.total_params);
        assert_eq!(r.modules.iter().take(3).map(|m| m.macs).sum::<u64>(), r.total_macs);
        assert_eq!(r.layers.iter().map(|l| l.params).sum::<usize>(), r.total_params);
        assert!(r.to_text().contains("4.614M"));
    }

    #[test]
    fn other_configs_are_not_gated() {
        let cfg = ModelConfig {
            dilation_set: vec![12, 24, 32],
            ..ModelConfig::default()
        };
        let r = audit(&build_model(&cfg).unwrap(), REFERENCE_INPUT).unwrap();
        assert!(r.gates.iter().all(|g| g.status == GateStatus::NotApplicable));
        assert!(r.passed());
        assert!(r.to_text().contains("not applicable"));
    }

    #[test]
    fn effectiveness_of_default_model() {
        let m = build_model(&ModelConfig::default()).unwrap();
        let r = audit(&m, REFERENCE_INPUT).unwrap().with_effectiveness(3.77).unwrap();
        let e = r.effectiveness.unwrap();
        assert!((e.score - 67.7).abs() < 1.0, "{e:?}");
    }
}

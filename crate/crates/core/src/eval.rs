//! Model evaluation over a labelled set and the per-class IoU table.

use serde::Serialize;

use crate::data::classes::class_code;
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::metrics::{miou, ConfusionMatrix, IouReport};
use crate::model::Model;
use crate::ops::{LabelMap, Mode};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub valid_pixels: u64,
    pub classes: Vec<String>,
    pub iou: IouReport,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(cm: ConfusionMatrix, images: usize) -> Result<Self> {
        Ok(Self {
            images,
            valid_pixels: cm.total(),
            classes: (0..cm.classes()).map(|i| class_code(i as u8).to_string()).collect(),
            iou: miou(&cm)?,
            confusion: cm,
        })
    }

    /// Two aligned rows: class codes then IoU in percent, mIoU first.
    pub fn to_text(&self) -> String {
        let mut head = format!("{:>7}", "mIoU");
        let mut row = format!("{:>7.2}", self.iou.mean * 100.0);
        for (c, v) in self.classes.iter().zip(&self.iou.per_class) {
            head.push_str(&format!(" {c:>6}"));
            row.push_str(&match v {
                Some(v) => format!(" {:>6.2}", v * 100.0),
                None => format!(" {:>6}", "n/a"),
            });
        }
        format!(
            "images: {}  valid pixels: {}\n{head}\n{row}\n",
            self.images, self.valid_pixels
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

pub(crate) fn check_labels(model: &Model, samples: &[SampleRecord]) -> Result<()> {
    let k = model.cfg.num_classes;
    let in_c = model.cfg.input_channels;
    for (i, s) in samples.iter().enumerate() {
        if let Some(&bad) = s.label.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Config(format!(
                "example {i} has label {bad} but the model predicts {k} classes"
            )));
        }
        if s.image.shape().c != in_c {
            return Err(Error::Config(format!(
                "example {i} has {} channels but the model expects {in_c}",
                s.image.shape().c
            )));
        }
    }
    Ok(())
}

/// Eval-mode prediction for one record.
pub fn predict(model: &Model, sample: &SampleRecord) -> Result<LabelMap> {
    Ok(model.forward(&sample.image, Mode::Eval, 0)?.1)
}

/// One global confusion matrix over every valid pixel.
pub fn confusion(model: &Model, samples: &[SampleRecord]) -> Result<ConfusionMatrix> {
    check_labels(model, samples)?;
    let mut cm = ConfusionMatrix::new(model.cfg.num_classes);
    for s in samples {
        let pred = predict(model, s)?;
        cm.accumulate(&s.label, &pred.data, Some(&s.valid))?;
    }
    Ok(cm)
}

pub fn evaluate(model: &Model, samples: &[SampleRecord]) -> Result<EvalReport> {
    EvalReport::from_confusion(confusion(model, samples)?, samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_table() {
        let mut cm = ConfusionMatrix::new(9);
        let t: Vec<u8> = (0..9).collect();
        cm.accumulate(&t, &t, None).unwrap();
        let r = EvalReport::from_confusion(cm, 1).unwrap();
        assert_eq!(r.iou.mean, 1.0);
        let text = r.to_text();
        let lines: Vec<_> = text.lines().collect();
        assert!(lines[1].contains("BG") && lines[1].ends_with("WC"));
        assert!(lines[2].trim_start().starts_with("100.00"));
        assert_eq!(lines[1].len(), lines[2].len());
    }
}

//! Dataset ingestion, label flattening, NRGB fusion, augmentation and the
//! synthetic corpus.

pub mod classes;
pub mod io;
pub mod synth;
pub mod transform;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use classes::{class_by_dir, flatten_labels, ClassFrequencyTable, CLASSES, NUM_CLASSES};
pub use synth::{synth_dataset, SynthExample};
pub use transform::{augment, augment_seed, denormalize, normalize_nrgb, AugmentConfig, SampleRecord};

/// One annotated image as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawExample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB, `height * width * 3`.
    pub rgb: Vec<u8>,
    pub nir: Vec<u8>,
    /// Class directory name to binary mask; masks may overlap.
    pub class_masks: BTreeMap<String, Vec<bool>>,
    pub valid: Option<Vec<bool>>,
}

impl RawExample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.pixels();
        let bad = |what: &str, got: usize, want: usize| {
            Error::Ingestion(format!("{}: {what} has {got} values, expected {want}", self.id))
        };
        if self.rgb.len() != 3 * p {
            return Err(bad("rgb", self.rgb.len(), 3 * p));
        }
        if self.nir.len() != p {
            return Err(bad("nir", self.nir.len(), p));
        }
        for (k, m) in &self.class_masks {
            class_by_dir(k)?;
            if m.len() != p {
                return Err(bad(k, m.len(), p));
            }
        }
        if let Some(v) = &self.valid {
            if v.len() != p {
                return Err(bad("valid mask", v.len(), p));
            }
        }
        Ok(())
    }

    pub fn label(&self, freq: &ClassFrequencyTable) -> Result<Vec<u8>> {
        flatten_labels(
            self.class_masks.iter().map(|(k, v)| (k.as_str(), v.as_slice())),
            freq,
            self.pixels(),
        )
    }

    pub fn to_sample(&self, freq: &ClassFrequencyTable) -> Result<SampleRecord> {
        self.validate()?;
        Ok(SampleRecord {
            image: normalize_nrgb(&self.rgb, &self.nir, self.height, self.width)?,
            label: self.label(freq)?,
            valid: self.valid.clone().unwrap_or_else(|| vec![true; self.pixels()]),
        })
    }
}

/// Raw mask pixel counts (before flattening) over `examples`.
pub fn corpus_frequencies(examples: &[RawExample]) -> Result<ClassFrequencyTable> {
    let mut t = ClassFrequencyTable::zeros();
    for ex in examples {
        for (k, m) in &ex.class_masks {
            t.add(k, m.iter().filter(|&&b| b).count() as u64)?;
        }
    }
    Ok(t)
}

/// Train/val/test proportions, or `All` to use every example in each role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitSpec {
    Ratios([u32; 3]),
    All,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratios([6, 2, 2])
    }
}

impl std::str::FromStr for SplitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(SplitSpec::All);
        }
        let parts: Vec<u32> = s
            .split(':')
            .map(|p| p.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("split `{s}` is not `a:b:c` or `all`")))?;
        match parts[..] {
            [a, b, c] if a + b + c > 0 => Ok(SplitSpec::Ratios([a, b, c])),
            _ => Err(Error::Config(format!("split `{s}` is not `a:b:c` or `all`"))),
        }
    }
}

impl std::fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitSpec::All => f.write_str("all"),
            SplitSpec::Ratios([a, b, c]) => write!(f, "{a}:{b}:{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn part(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown split part `{name}` (train, val, test)"))),
        }
    }
}

/// Seeded shuffle, then cut by the ratios; each part is sorted.
pub fn split_indices(n: usize, spec: SplitSpec, seed: u64) -> Split {
    let all: Vec<usize> = (0..n).collect();
    let [a, b, c] = match spec {
        SplitSpec::All => {
            return Split {
                train: all.clone(),
                val: all.clone(),
                test: all,
            }
        }
        SplitSpec::Ratios(r) => r,
    };
    let mut idx = all;
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total = (a + b + c) as f64;
    let n_train = (n as f64 * a as f64 / total).round() as usize;
    let n_val = ((n as f64 * (a + b) as f64 / total).round() as usize).max(n_train) - n_train;
    let cut = |r: std::ops::Range<usize>| {
        let mut v = idx[r].to_vec();
        v.sort_unstable();
        v
    };
    Split {
        train: cut(0..n_train),
        val: cut(n_train..n_train + n_val),
        test: cut(n_train + n_val..n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_ratios() {
        let s = split_indices(10, SplitSpec::default(), 1);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (6, 2, 2));
        let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split_indices(10, SplitSpec::default(), 1), s);
        let a = split_indices(4, SplitSpec::All, 0);
        assert_eq!(a.val, vec![0, 1, 2, 3]);
        assert_eq!("6:2:2".parse::<SplitSpec>().unwrap(), SplitSpec::default());
        assert!("6:2".parse::<SplitSpec>().is_err());
        assert_eq!("all".parse::<SplitSpec>().unwrap().to_string(), "all");
    }

    #[test]
    fn uncovered_pixels_are_background() {
        let ex = RawExample {
            id: "a".into(),
            height: 1,
            width: 2,
            rgb: vec![0; 6],
            nir: vec![0; 2],
            class_masks: [("water".to_string(), vec![true, false])].into(),
            valid: None,
        };
        let s = ex.to_sample(&ClassFrequencyTable::reference()).unwrap();
        assert_eq!(s.label, [6, 0]);
        assert_eq!(s.valid, [true, true]);
        let mut bad = ex.clone();
        bad.nir.pop();
        assert!(matches!(bad.validate(), Err(Error::Ingestion(_))));
    }
}

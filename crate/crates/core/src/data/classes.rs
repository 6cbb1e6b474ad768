//! Class table, frequency table and overlap flattening.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassInfo {
    pub index: u8,
    pub code: &'static str,
    /// Directory name under `labels/`; also the key in frequency tables.
    pub dir: &'static str,
}

/// Label indices follow the IoU table column order.
pub const CLASSES: [ClassInfo; NUM_CLASSES] = [
    ClassInfo { index: 0, code: "BG", dir: "background" },
    ClassInfo { index: 1, code: "DP", dir: "double_plant" },
    ClassInfo { index: 2, code: "DD", dir: "drydown" },
    ClassInfo { index: 3, code: "ER", dir: "endrow" },
    ClassInfo { index: 4, code: "ND", dir: "nutrient_deficiency" },
    ClassInfo { index: 5, code: "PS", dir: "planter_skip" },
    ClassInfo { index: 6, code: "WA", dir: "water" },
    ClassInfo { index: 7, code: "WW", dir: "waterway" },
    ClassInfo { index: 8, code: "WC", dir: "weed_cluster" },
];

/// Annotated upstream but dropped for scarcity.
pub const SKIPPED_CLASSES: &[&str] = &["storm_damage"];

/// Anomaly pixel counts of the public training split, in class-index order
/// (background has no entry).
pub const REFERENCE_PIXEL_COUNTS: [(u8, u64); 8] = [
    (1, 167_000_000),
    (2, 2_510_000_000),
    (3, 191_000_000),
    (4, 1_450_000_000),
    (5, 39_100_000),
    (6, 224_000_000),
    (7, 129_000_000),
    (8, 1_080_000_000),
];

/// Resolves an annotation directory name. `Ok(None)` for skipped classes.
pub fn class_by_dir(name: &str) -> Result<Option<u8>> {
    if SKIPPED_CLASSES.contains(&name) {
        return Ok(None);
    }
    CLASSES[1..]
        .iter()
        .find(|c| c.dir == name)
        .map(|c| Some(c.index))
        .ok_or_else(|| Error::Ingestion(format!("unknown class `{name}`")))
}

pub fn class_code(index: u8) -> &'static str {
    CLASSES.get(index as usize).map_or("??", |c| c.code)
}

/// Anomaly-class pixel counts keyed by directory name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassFrequencyTable {
    pub counts: BTreeMap<String, u64>,
}

impl ClassFrequencyTable {
    pub fn reference() -> Self {
        Self {
            counts: REFERENCE_PIXEL_COUNTS
                .iter()
                .map(|&(i, n)| (CLASSES[i as usize].dir.to_string(), n))
                .collect(),
        }
    }

    pub fn zeros() -> Self {
        Self {
            counts: CLASSES[1..].iter().map(|c| (c.dir.to_string(), 0)).collect(),
        }
    }

    pub fn add(&mut self, class: &str, pixels: u64) -> Result<()> {
        if class_by_dir(class)?.is_some() {
            *self.counts.entry(class.to_string()).or_insert(0) += pixels;
        }
        Ok(())
    }

    pub fn count(&self, index: u8) -> u64 {
        self.counts.get(CLASSES[index as usize].dir).copied().unwrap_or(0)
    }

    /// Anomaly class indices from most to least frequent. Ties go to the
    /// lower index first.
    pub fn ranking(&self) -> Vec<u8> {
        let mut idx: Vec<u8> = (1..NUM_CLASSES as u8).collect();
        idx.sort_by_key(|&i| (std::cmp::Reverse(self.count(i)), i));
        idx
    }

    /// Overlap priority per class index; a higher value wins. The rarest
    /// class gets the highest priority.
    pub fn priority(&self) -> [u8; NUM_CLASSES] {
        let mut p = [0u8; NUM_CLASSES];
        for (rank, i) in self.ranking().into_iter().enumerate() {
            p[i as usize] = rank as u8 + 1;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        for k in self.counts.keys() {
            if class_by_dir(k)?.is_none() {
                return Err(Error::Ingestion(format!("frequency table lists skipped class `{k}`")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        let t: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("string map serialises")
    }
}

/// Merges possibly overlapping binary masks into one label map. Where masks
/// overlap the class with the smallest frequency wins; uncovered pixels are
/// background. Skipped classes are ignored.
pub fn flatten_labels<'a, I>(masks: I, freq: &ClassFrequencyTable, len: usize) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = (&'a str, &'a [bool])>,
{
    let prio = freq.priority();
    let mut out = vec![0u8; len];
    for (name, mask) in masks {
        let Some(cls) = class_by_dir(name)? else { continue };
        crate::error::check_dim("flatten_labels", crate::error::Axis::Length, len, mask.len())?;
        for (o, &m) in out.iter_mut().zip(mask) {
            if m && prio[cls as usize] > prio[*o as usize] {
                *o = cls;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_ranking() {
        let codes: Vec<_> = ClassFrequencyTable::reference()
            .ranking()
            .into_iter()
            .map(class_code)
            .collect();
        assert_eq!(codes, ["DD", "ND", "WC", "WA", "ER", "DP", "WW", "PS"]);
    }

    #[test]
    fn rarest_wins() {
        let f = ClassFrequencyTable::reference();
        let dd = [true, true, false];
        let ps = [true, false, false];
        let out = flatten_labels([("drydown", &dd[..]), ("planter_skip", &ps[..])], &f, 3).unwrap();
        assert_eq!(out, [5, 2, 0]);
    }

    #[test]
    fn unknown_and_skipped_names() {
        let f = ClassFrequencyTable::reference();
        let m = [true];
        assert!(matches!(
            flatten_labels([("cloud", &m[..])], &f, 1),
            Err(Error::Ingestion(_))
        ));
        assert_eq!(flatten_labels([("storm_damage", &m[..])], &f, 1).unwrap(), [0]);
    }

    #[test]
    fn json_round_trip() {
        let f = ClassFrequencyTable::reference();
        let back: ClassFrequencyTable = serde_json::from_str(&f.to_json()).unwrap();
        assert_eq!(back, f);
        assert!(f.to_json().contains("\"planter_skip\": 39100000"));
    }

    /// Brute force: for each pixel list the covering classes and take the
    /// one with the smallest count (ties to the larger index, which sorts
    /// after it in the ranking).
    fn brute(masks: &[(u8, Vec<bool>)], f: &ClassFrequencyTable, len: usize) -> Vec<u8> {
        (0..len)
            .map(|p| {
                masks
                    .iter()
                    .filter(|(_, m)| m[p])
                    .map(|&(c, _)| c)
                    .min_by_key(|&c| (f.count(c), std::cmp::Reverse(c)))
                    .unwrap_or(0)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_ignores_order(
            counts in prop::collection::vec(0u64..50, 8),
            picks in prop::collection::vec((1u8..9, prop::collection::vec(any::<bool>(), 16)), 0..6),
            rot in 0usize..6,
        ) {
            let mut f = ClassFrequencyTable::zeros();
            for (i, n) in counts.iter().enumerate() {
                f.add(CLASSES[i + 1].dir, *n).unwrap();
            }
            let masks: Vec<(u8, Vec<bool>)> = picks;
            let want = brute(&masks, &f, 16);
            let as_named = |ms: &[(u8, Vec<bool>)]| {
                let named: Vec<(&str, &[bool])> =
                    ms.iter().map(|(c, m)| (CLASSES[*c as usize].dir, m.as_slice())).collect();
                flatten_labels(named, &f, 16).unwrap()
            };
            prop_assert_eq!(as_named(&masks), want.clone());
            let mut rotated = masks.clone();
            if !rotated.is_empty() {
                let k = rot % rotated.len();
                rotated.rotate_left(k);
                rotated.reverse();
            }
            prop_assert_eq!(as_named(&rotated), want);
        }
    }
}

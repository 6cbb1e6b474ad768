//! Desk-scale synthetic corpus: lattice-aligned rectangles per class with
//! distinct NRGB signatures and imbalanced areas.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::classes::{ClassFrequencyTable, CLASSES};
use super::RawExample;

/// Rectangle corners snap to this many pixels.
pub const LATTICE: usize = 8;

/// `(class index, target area fraction)` from most to least frequent.
pub const AREA_PLAN: [(u8, f64); 8] = [
    (2, 0.16),
    (4, 0.11),
    (8, 0.08),
    (6, 0.055),
    (3, 0.04),
    (1, 0.03),
    (7, 0.022),
    (5, 0.015),
];

/// Mean `(N, R, G, B)` per class index.
pub const SIGNATURES: [[u8; 4]; 9] = [
    [150, 90, 130, 70],
    [200, 60, 160, 60],
    [90, 190, 170, 110],
    [120, 140, 100, 90],
    [170, 200, 200, 60],
    [60, 150, 110, 140],
    [20, 40, 70, 150],
    [110, 70, 110, 50],
    [230, 50, 120, 40],
];

const NOISE: i16 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthExample {
    pub raw: RawExample,
    /// Label map painted while generating; rarer classes drawn last.
    pub expected_label: Vec<u8>,
}

/// Ranking the generator aims for, most frequent first.
pub fn configured_ranking() -> Vec<u8> {
    AREA_PLAN.iter().map(|&(c, _)| c).collect()
}

/// Frequency table whose ranking equals [`configured_ranking`].
pub fn plan_frequencies() -> ClassFrequencyTable {
    let mut t = ClassFrequencyTable::zeros();
    for &(c, f) in &AREA_PLAN {
        t.counts.insert(CLASSES[c as usize].dir.to_string(), (f * 1e6) as u64);
    }
    t
}

fn rect(rng: &mut ChaCha8Rng, cells: usize, frac: f64) -> (usize, usize, usize, usize) {
    let area = (frac * (cells * cells) as f64 * rng.gen_range(0.92..1.08)).max(1.0);
    let side = area.sqrt();
    let w = ((side * rng.gen_range(0.6..1.6)).round() as usize).clamp(1, cells);
    let h = ((area / w as f64).round() as usize).clamp(1, cells);
    let x = rng.gen_range(0..=cells - w);
    let y = rng.gen_range(0..=cells - h);
    (y, x, h, w)
}

pub fn synth_example(size: usize, seed: u64, index: usize) -> SynthExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D));
    let cells = (size / LATTICE).max(1);
    let cell = size / cells;
    let plane = size * size;
    let mut label = vec![0u8; plane];
    let mut masks = BTreeMap::new();
    for &(c, frac) in &AREA_PLAN {
        let (y0, x0, h, w) = rect(&mut rng, cells, frac);
        let mut m = vec![false; plane];
        for y in y0 * cell..(y0 + h) * cell {
            for x in x0 * cell..(x0 + w) * cell {
                m[y * size + x] = true;
                label[y * size + x] = c;
            }
        }
        masks.insert(CLASSES[c as usize].dir.to_string(), m);
    }
    // Half the images lose a band along one edge to the valid mask.
    let valid = rng.gen_bool(0.5).then(|| {
        let band = (cells / 8).max(1) * cell;
        let edge = rng.gen_range(0..4);
        (0..plane)
            .map(|p| {
                let (y, x) = (p / size, p % size);
                !match edge {
                    0 => y < band,
                    1 => y >= size - band,
                    2 => x < band,
                    _ => x >= size - band,
                }
            })
            .collect::<Vec<bool>>()
    });
    let mut rgb = vec![0u8; plane * 3];
    let mut nir = vec![0u8; plane];
    for p in 0..plane {
        let sig = SIGNATURES[label[p] as usize];
        let mut px = [0u8; 4];
        for (o, &s) in px.iter_mut().zip(&sig) {
            *o = (s as i16 + rng.gen_range(-NOISE..=NOISE)).clamp(0, 255) as u8;
        }
        if valid.as_ref().is_some_and(|v| !v[p]) {
            px = [0; 4];
            label[p] = 0;
            for m in masks.values_mut() {
                m[p] = false;
            }
        }
        nir[p] = px[0];
        rgb[p * 3..p * 3 + 3].copy_from_slice(&px[1..]);
    }
    SynthExample {
        raw: RawExample {
            id: format!("s{index:05}"),
            height: size,
            width: size,
            rgb,
            nir,
            class_masks: masks,
            valid,
        },
        expected_label: label,
    }
}

/// `n` examples of `size x size`; example `i` depends only on `(seed, i)`.
pub fn synth_dataset(n: usize, seed: u64, size: usize) -> Vec<SynthExample> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(|i| synth_example(size, seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::classes::flatten_labels;
    use crate::data::corpus_frequencies;

    #[test]
    fn deterministic() {
        assert_eq!(synth_dataset(4, 7, 32), synth_dataset(4, 7, 32));
        assert_ne!(synth_dataset(1, 7, 32), synth_dataset(1, 8, 32));
    }

    #[test]
    fn flattening_reproduces_painted_labels() {
        let freq = plan_frequencies();
        let mut overlaps = 0;
        for ex in synth_dataset(6, 3, 64) {
            let r = &ex.raw;
            let got = flatten_labels(r.class_masks.iter().map(|(k, v)| (k.as_str(), v.as_slice())), &freq, 64 * 64)
                .unwrap();
            assert_eq!(got, ex.expected_label);
            overlaps += (0..64 * 64)
                .filter(|&p| r.class_masks.values().filter(|m| m[p]).count() > 1)
                .count();
        }
        assert!(overlaps > 0);
    }

    #[test]
    fn corpus_ranking_matches_plan() {
        let raw: Vec<_> = synth_dataset(100, 11, 128).into_iter().map(|e| e.raw).collect();
        assert_eq!(corpus_frequencies(&raw).unwrap().ranking(), configured_ranking());
        assert_eq!(plan_frequencies().ranking(), configured_ranking());
    }
}

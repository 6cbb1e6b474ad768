//! NRGB normalisation and train-time augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Axis, Result};
use crate::tensor::{Shape4, Tensor4};

/// Per-channel mean in N, R, G, B order.
pub const MEAN: [f32; 4] = [0.485, 0.485, 0.456, 0.406];
pub const STD: [f32; 4] = [0.229, 0.229, 0.224, 0.225];

/// One normalised training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `1 x 4 x h x w`, channels N, R, G, B.
    pub image: Tensor4<f32>,
    pub label: Vec<u8>,
    pub valid: Vec<bool>,
}

impl SampleRecord {
    pub fn hw(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.h, s.w)
    }
}

/// `rgb` is interleaved `h*w*3`, `nir` is `h*w`.
pub fn normalize_nrgb(rgb: &[u8], nir: &[u8], h: usize, w: usize) -> Result<Tensor4<f32>> {
    check_dim("normalize_nrgb.rgb", Axis::Length, h * w * 3, rgb.len())?;
    check_dim("normalize_nrgb.nir", Axis::Length, h * w, nir.len())?;
    let f = |c: usize, v: u8| (v as f32 / 255.0 - MEAN[c]) / STD[c];
    Ok(Tensor4::from_fn(Shape4::new(1, 4, h, w), |_, c, y, x| {
        let p = y * w + x;
        if c == 0 {
            f(0, nir[p])
        } else {
            f(c, rgb[p * 3 + c - 1])
        }
    }))
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Inverse of [`normalize_nrgb`] for sample 0; returns `(rgb, nir)`.
pub fn denormalize(image: &Tensor4<f32>) -> (Vec<u8>, Vec<u8>) {
    let s = image.shape();
    let plane = s.h * s.w;
    let mut rgb = vec![0u8; plane * 3];
    let mut nir = vec![0u8; plane];
    for c in 0..4 {
        for (p, &v) in image.plane(0, c).iter().enumerate() {
            let b = to_u8(v * STD[c] + MEAN[c]);
            if c == 0 {
                nir[p] = b;
            } else {
                rgb[p * 3 + c - 1] = b;
            }
        }
    }
    (rgb, nir)
}

fn remap<T: Copy>(src: &[T], out_w: usize, len: usize, at: impl Fn(usize, usize) -> usize) -> Vec<T> {
    (0..len).map(|i| src[at(i / out_w, i % out_w)]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometric {
    FlipH,
    FlipV,
    /// Quarter turn counter-clockwise.
    Rot90,
}

impl Geometric {
    fn out_hw(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Geometric::Rot90 => (w, h),
            _ => (h, w),
        }
    }

    fn apply_plane<T: Copy>(self, src: &[T], h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = self.out_hw(h, w);
        match self {
            Geometric::FlipH => remap(src, ow, oh * ow, |y, x| y * w + (w - 1 - x)),
            Geometric::FlipV => remap(src, ow, oh * ow, |y, x| (h - 1 - y) * w + x),
            Geometric::Rot90 => remap(src, ow, oh * ow, |y, x| x * w + (w - 1 - y)),
        }
    }

    /// Applies the same transform to image, label and valid mask.
    pub fn apply(self, s: &SampleRecord) -> SampleRecord {
        let sh = s.image.shape();
        let (oh, ow) = self.out_hw(sh.h, sh.w);
        let mut data = Vec::with_capacity(sh.numel());
        for c in 0..sh.c {
            data.extend(self.apply_plane(s.image.plane(0, c), sh.h, sh.w));
        }
        SampleRecord {
            image: Tensor4::from_vec(Shape4::new(1, sh.c, oh, ow), data).expect("same element count"),
            label: self.apply_plane(&s.label, sh.h, sh.w),
            valid: self.apply_plane(&s.valid, sh.h, sh.w),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub geometric: bool,
    pub photometric: bool,
    /// Hue shift range as a fraction of the full circle.
    pub hue: f32,
    /// Relative saturation scale range.
    pub saturation: f32,
    /// Relative value scale range, shared with NIR.
    pub value: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            geometric: true,
            photometric: true,
            hue: 0.05,
            saturation: 0.05,
            value: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            geometric: false,
            photometric: false,
            ..Self::default()
        }
    }
}

/// Seed for one example in one epoch, independent of loading order.
pub fn augment_seed(corpus_seed: u64, index: usize, epoch: usize) -> u64 {
    let mut z = corpus_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).rotate_left(32);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Hue shift `dh`, saturation scale `1 + ds`, value scale `1 + dv` on the
/// RGB planes; NIR gets the value scale only.
pub fn hsv_jitter(image: &mut Tensor4<f32>, dh: f32, ds: f32, dv: f32) {
    let s = image.shape();
    let plane = s.h * s.w;
    let d = image.data_mut();
    let raw = |c: usize, v: f32| v * STD[c] + MEAN[c];
    let norm = |c: usize, v: f32| (v.clamp(0.0, 1.0) - MEAN[c]) / STD[c];
    for n in 0..s.n {
        let base = n * 4 * plane;
        for p in 0..plane {
            let at = |c: usize| base + c * plane + p;
            let nir = raw(0, d[at(0)]) * (1.0 + dv);
            let (h, sat, v) = rgb_to_hsv(raw(1, d[at(1)]), raw(2, d[at(2)]), raw(3, d[at(3)]));
            let (r, g, b) = hsv_to_rgb(h + dh, (sat * (1.0 + ds)).clamp(0.0, 1.0), (v * (1.0 + dv)).clamp(0.0, 1.0));
            d[at(0)] = norm(0, nir);
            d[at(1)] = norm(1, r);
            d[at(2)] = norm(2, g);
            d[at(3)] = norm(3, b);
        }
    }
}

/// Random flips, quarter turns and HSV jitter, all drawn from `seed`.
pub fn augment(sample: &SampleRecord, cfg: &AugmentConfig, seed: u64) -> SampleRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();
    if cfg.geometric {
        if rng.gen_bool(0.5) {
            out = Geometric::FlipH.apply(&out);
        }
        if rng.gen_bool(0.5) {
            out = Geometric::FlipV.apply(&out);
        }
        for _ in 0..rng.gen_range(0..4) {
            out = Geometric::Rot90.apply(&out);
        }
    }
    if cfg.photometric {
        let mut draw = |r: f32| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let (dh, ds, dv) = (draw(cfg.hue), draw(cfg.saturation), draw(cfg.value));
        hsv_jitter(&mut out.image, dh, ds, dv);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};

    fn sample(h: usize, w: usize, seed: u64) -> SampleRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb: Vec<u8> = (0..h * w * 3).map(|_| rng.gen()).collect();
        let nir: Vec<u8> = (0..h * w).map(|_| rng.gen()).collect();
        SampleRecord {
            image: normalize_nrgb(&rgb, &nir, h, w).unwrap(),
            label: (0..h * w).map(|_| rng.gen_range(0..9)).collect(),
            valid: (0..h * w).map(|_| rng.gen_bool(0.8)).collect(),
        }
    }

    #[test]
    fn normalisation_constants() {
        let t = normalize_nrgb(&[255, 0, 0, 124, 0, 0], &[0, 0], 1, 2).unwrap();
        assert!((t.at(0, 1, 0, 0) - (1.0 - 0.485) / 0.229).abs() < 1e-6);
        assert!((t.at(0, 1, 0, 0) - 2.2489).abs() < 1e-4);
        assert!((t.at(0, 0, 0, 0) + 2.1179).abs() < 1e-4);
        assert!(t.at(0, 1, 0, 1).abs() < 1.0 / 255.0 / 0.229);
        assert!(normalize_nrgb(&[0; 5], &[0], 1, 1).is_err());
    }

    #[test]
    fn marker_pixel_follows_flip() {
        let mut s = sample(4, 6, 1);
        s.label.iter_mut().for_each(|l| *l = 0);
        s.label[6 + 1] = 7;
        let marker = s.image.at(0, 2, 1, 1);
        let f = Geometric::FlipH.apply(&s);
        assert_eq!(f.label[6 + 4], 7);
        assert_eq!(f.image.at(0, 2, 1, 4), marker);
        let r = Geometric::Rot90.apply(&s);
        assert_eq!(r.image.shape(), Shape4::new(1, 4, 6, 4));
        // (y=1, x=1) in a 4x6 image lands on (6-1-1, 1) after a CCW turn.
        assert_eq!(r.label[4 * 4 + 1], 7);
        assert_eq!(r.image.at(0, 2, 4, 1), marker);
    }

    #[test]
    fn jitter_identity_and_nir_scaling() {
        let s = sample(3, 3, 2);
        let mut t = s.image.clone();
        hsv_jitter(&mut t, 0.0, 0.0, 0.0);
        for (a, b) in t.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() < 1e-4);
        }
        let mut u = normalize_nrgb(&[10, 20, 30], &[100], 1, 1).unwrap();
        hsv_jitter(&mut u, 0.0, 0.0, 0.1);
        let (rgb, nir) = denormalize(&u);
        assert_eq!(nir, [110]);
        assert_eq!(rgb, [11, 22, 33]);
    }

    #[test]
    fn augment_is_deterministic() {
        let s = sample(8, 8, 3);
        let cfg = AugmentConfig::default();
        assert_eq!(augment(&s, &cfg, 9), augment(&s, &cfg, 9));
        assert_eq!(augment(&s, &AugmentConfig::off(), 9), s);
        assert_ne!(augment_seed(1, 2, 3), augment_seed(1, 3, 2));
    }

    proptest! {
        #[test]
        fn geometric_involutions(h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
            let s = sample(h, w, seed);
            prop_assert_eq!(&Geometric::FlipH.apply(&Geometric::FlipH.apply(&s)), &s);
            prop_assert_eq!(&Geometric::FlipV.apply(&Geometric::FlipV.apply(&s)), &s);
            let mut r = s.clone();
            for _ in 0..4 {
                r = Geometric::Rot90.apply(&r);
            }
            prop_assert_eq!(&r, &s);
        }

        #[test]
        fn augment_preserves_label_multiset(seed in any::<u64>()) {
            let s = sample(5, 7, seed);
            let a = augment(&s, &AugmentConfig::default(), seed);
            let hist = |l: &[u8]| l.iter().fold([0usize; 9], |mut h, &v| { h[v as usize] += 1; h });
            prop_assert_eq!(hist(&a.label), hist(&s.label));
            prop_assert_eq!(a.valid.iter().filter(|&&v| v).count(), s.valid.iter().filter(|&&v| v).count());
            prop_assert!(a.image.all_finite());
        }

        #[test]
        fn normalise_round_trip(px in prop::collection::vec(any::<u8>(), 12)) {
            let (rgb, nir) = (&px[..9], &px[9..]);
            let t = normalize_nrgb(rgb, nir, 1, 3).unwrap();
            let (r2, n2) = denormalize(&t);
            prop_assert_eq!(r2.as_slice(), rgb);
            prop_assert_eq!(n2.as_slice(), nir);
        }
    }
}

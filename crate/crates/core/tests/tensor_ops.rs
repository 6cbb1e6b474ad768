use dasconv_core::gradcheck::{self, GradcheckConfig};
use dasconv_core::ops::{self, pad_for_same, ConvSpec};
use dasconv_core::{Shape4, Tensor4};
use proptest::prelude::*;
use proptest::strategy::ValueTree;

/// Direct evaluation of the dilated, grouped cross-correlation sum.
fn naive_conv(x: &Tensor4<f64>, w: &Tensor4<f64>, spec: &ConvSpec) -> Tensor4<f64> {
    let s = x.shape();
    let (kh, kw) = spec.kernel;
    let span_h = spec.dilation * (kh - 1) + 1;
    let span_w = spec.dilation * (kw - 1) + 1;
    let ho = (s.h + 2 * spec.padding - span_h) / spec.stride + 1;
    let wo = (s.w + 2 * spec.padding - span_w) / spec.stride + 1;
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    Tensor4::from_fn(Shape4::new(s.n, spec.out_channels, ho, wo), |n, co, oy, ox| {
        let grp = co / cout_g;
        let mut acc = 0.0;
        for ci in 0..cin_g {
            for m in 0..kh {
                for k in 0..kw {
                    let iy = (oy * spec.stride + m * spec.dilation) as isize - spec.padding as isize;
                    let ix = (ox * spec.stride + k * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                        continue;
                    }
                    acc += w.at(co, ci, m, k) * x.at(n, grp * cin_g + ci, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
}

fn lcg_tensor(shape: Shape4, seed: u64) -> Tensor4<f64> {
    let mut s = seed.wrapping_add(0x9E3779B97F4A7C15);
    Tensor4::from_fn(shape, |_, _, _, _| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

fn max_rel(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1e-12);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

fn conv_spec_strategy() -> impl Strategy<Value = (Shape4, ConvSpec)> {
    (
        1usize..=2,
        1usize..=3,
        1usize..=3,
        prop::sample::select(vec![1usize, 2, 3, 5]),
        1usize..=3,
        1usize..=2,
        0usize..=3,
        any::<bool>(),
        4usize..=9,
        4usize..=9,
    )
        .prop_filter_map("empty output", |(n, g, cpg, k, d, s, p, depthwise, h, w)| {
            let (cin, cout, groups) = if depthwise {
                (g * cpg, g * cpg, g * cpg)
            } else {
                (g * cpg, g * (1 + cpg % 2), g)
            };
            let spec = ConvSpec {
                in_channels: cin,
                out_channels: cout,
                kernel: (k, k),
                stride: s,
                dilation: d,
                padding: p,
                groups,
                has_bias: false,
            };
            spec.output_hw(h, w).ok()?;
            Some((Shape4::new(n, cin, h, w), spec))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_matches_naive_oracle((shape, spec) in conv_spec_strategy(), seed in any::<u64>()) {
        let x = lcg_tensor(shape, seed);
        let w = lcg_tensor(spec.weight_shape(), seed ^ 1);
        let fast = ops::conv2d(&x, &w, None, &spec).unwrap();
        let slow = naive_conv(&x, &w, &spec);
        prop_assert_eq!(fast.shape(), slow.shape());
        let (ho, wo) = spec.output_hw(shape.h, shape.w).unwrap();
        let span = spec.dilation * (spec.kernel.0 - 1) + 1;
        prop_assert_eq!(ho, (shape.h + 2 * spec.padding - span) / spec.stride + 1);
        prop_assert_eq!(wo, fast.shape().w);
        prop_assert!(max_rel(&fast, &slow) < 1e-12);
    }

    #[test]
    fn conv_is_linear((shape, spec) in conv_spec_strategy(), seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = lcg_tensor(shape, seed);
        let y = lcg_tensor(shape, seed ^ 7);
        let w = lcg_tensor(spec.weight_shape(), seed ^ 11);
        let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = ops::conv2d(&combo, &w, None, &spec).unwrap();
        let cx = ops::conv2d(&x, &w, None, &spec).unwrap();
        let cy = ops::conv2d(&y, &w, None, &spec).unwrap();
        let rhs = cx.zip_map(&cy, |p, q| a * p + b * q).unwrap();
        prop_assert!(max_rel(&lhs, &rhs) < 1e-5);
    }

    #[test]
    fn same_padding_preserves_extent(d in prop::sample::select(vec![1usize, 4, 8, 12, 24]), k in prop::sample::select(vec![1usize, 3, 5]), h in 1usize..40, w in 1usize..40) {
        let spec = ConvSpec::same(1, 1, k, d);
        prop_assert_eq!(spec.padding, pad_for_same(k, d));
        prop_assert_eq!(spec.output_hw(h, w).unwrap(), (h, w));
    }

    #[test]
    fn softmax_normalizes_and_argmax_is_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let x = lcg_tensor(Shape4::new(2, 9, 3, 4), seed).scale(5.0);
        let p = ops::softmax_channels(&x);
        for n in 0..2 {
            for y in 0..3 {
                for xx in 0..4 {
                    let s: f64 = (0..9).map(|c| p.at(n, c, y, xx)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
        // per-pixel shift: add a pixel-dependent constant to every channel
        let shifted = Tensor4::from_fn(x.shape(), |n, c, y, xx| x.at(n, c, y, xx) + shift * (1 + y * 4 + xx) as f64);
        prop_assert_eq!(ops::argmax_channels(&x), ops::argmax_channels(&shifted));
        let uniform_shift = x.map(|v| v + shift);
        prop_assert!(max_rel(&ops::softmax_channels(&uniform_shift), &p) < 1e-6);
    }
}

#[test]
fn conv_oracle_equivalence_200_cases() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let strategy = (conv_spec_strategy(), any::<u64>());
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let ((shape, spec), seed) = strategy.new_tree(&mut runner).unwrap().current();
        let x = lcg_tensor(shape, seed);
        let w = lcg_tensor(spec.weight_shape(), seed.rotate_left(7));
        worst = worst.max(max_rel(&ops::conv2d(&x, &w, None, &spec).unwrap(), &naive_conv(&x, &w, &spec)));
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn depthwise_equals_independent_per_channel_convs() {
    let x = lcg_tensor(Shape4::new(2, 3, 7, 6), 99);
    let spec = ConvSpec::depthwise(3, 3, 1, 2);
    let w = lcg_tensor(spec.weight_shape(), 5);
    let grouped = ops::conv2d(&x, &w, None, &spec).unwrap();
    for c in 0..3 {
        let xc = Tensor4::from_fn(Shape4::new(2, 1, 7, 6), |n, _, y, xx| x.at(n, c, y, xx));
        let wc = Tensor4::from_fn(Shape4::new(1, 1, 3, 3), |_, _, m, k| w.at(c, 0, m, k));
        let single = ops::conv2d(&xc, &wc, None, &ConvSpec::same(1, 1, 3, 2)).unwrap();
        for n in 0..2 {
            for y in 0..7 {
                for xx in 0..6 {
                    assert!((single.at(n, 0, y, xx) - grouped.at(n, c, y, xx)).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn zero_weights_give_zero_output() {
    let x = lcg_tensor(Shape4::new(1, 4, 6, 6), 3);
    let w = Tensor4::zeros(Shape4::new(5, 4, 3, 3));
    let y = ops::conv2d(&x, &w, None, &ConvSpec::same(4, 5, 3, 2)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn das_branch_scale_shape() {
    let x = Tensor4::<f32>::zeros(Shape4::new(1, 960, 32, 32));
    let spec = ConvSpec::same(960, 96, 3, 4);
    let w = Tensor4::<f32>::zeros(spec.weight_shape());
    let y = ops::conv2d(&x, &w, None, &spec).unwrap();
    assert_eq!(y.shape(), Shape4::new(1, 96, 32, 32));
    assert_eq!(ops::global_avg_pool(&x).shape(), Shape4::new(1, 960, 1, 1));
}

#[test]
fn concat_matches_aspp_width() {
    let a = Tensor4::<f32>::zeros(Shape4::new(1, 96, 32, 32));
    let y = ops::concat_channels(&[&a, &a]).unwrap();
    assert_eq!(y.shape().c, 192);
    let p1 = Tensor4::<f32>::zeros(Shape4::new(1, 256, 32, 32));
    let das = Tensor4::<f32>::zeros(Shape4::new(1, 192, 32, 32));
    let y = ops::concat_channels(&[&p1, &das, &das, &das, &das, &p1]).unwrap();
    assert_eq!(y.shape(), Shape4::new(1, 1280, 32, 32));
}

#[test]
fn every_primitive_passes_gradcheck() {
    let reports = gradcheck::check_all(&GradcheckConfig::default()).unwrap();
    assert_eq!(reports.len(), gradcheck::OP_NAMES.len());
    for r in &reports {
        assert!(r.cases >= 5);
        assert!(r.passed, "{} failed with relative error {:e}", r.op, r.max_rel_error);
    }
}

#[test]
fn kernels_are_deterministic() {
    let x = lcg_tensor(Shape4::new(3, 4, 9, 9), 17).cast::<f32>();
    let spec = ConvSpec::same(4, 6, 3, 2).with_stride(2);
    let w = lcg_tensor(spec.weight_shape(), 18).cast::<f32>();
    let a = ops::conv2d(&x, &w, None, &spec).unwrap();
    let b = ops::conv2d(&x, &w, None, &spec).unwrap();
    let bits = |t: &Tensor4<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let ga = ops::conv2d_backward(&x, &w, &a, &spec, true).unwrap();
    let gb = ops::conv2d_backward(&x, &w, &a, &spec, true).unwrap();
    assert_eq!(bits(&ga.weight), bits(&gb.weight));
    assert_eq!(bits(ga.input.as_ref().unwrap()), bits(gb.input.as_ref().unwrap()));
}

mod common;

use common::{random, rng};
use mznet_tensor::conv::conv2d;
use mznet_tensor::ops::{bilinear_resize, global_avg_pool, local_avg_pool, pixel_shuffle, pixel_unshuffle};
use mznet_tensor::{ConvSpec, Shape, Tensor};
use proptest::prelude::*;

/// Quadruple loop over (n, co, oh, ow) with the tap sum spelled out.
fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: &ConvSpec) -> Tensor {
    let xs = x.shape();
    let ho = (xs.h + 2 * s.padding.0 - s.dilation.0 * (s.kernel.0 - 1) - 1) / s.stride.0 + 1;
    let wo = (xs.w + 2 * s.padding.1 - s.dilation.1 * (s.kernel.1 - 1) - 1) / s.stride.1 + 1;
    let cin_g = s.in_channels / s.groups;
    let cout_g = s.out_channels / s.groups;
    Tensor::from_fn(Shape::new(xs.n, s.out_channels, ho, wo), |n, co, oh, ow| {
        let g = co / cout_g;
        let mut acc = b.map_or(0.0, |b| b.data()[co]);
        for ci in 0..cin_g {
            for ki in 0..s.kernel.0 {
                for kj in 0..s.kernel.1 {
                    let ih = (oh * s.stride.0 + ki * s.dilation.0) as i64 - s.padding.0 as i64;
                    let iw = (ow * s.stride.1 + kj * s.dilation.1) as i64 - s.padding.1 as i64;
                    if ih < 0 || iw < 0 || ih >= xs.h as i64 || iw >= xs.w as i64 {
                        continue;
                    }
                    acc += w.at(co, ci, ki, kj) * x.at(n, g * cin_g + ci, ih as usize, iw as usize);
                }
            }
        }
        acc
    })
}

fn check_conv(spec: ConvSpec, in_shape: Shape, seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random(in_shape, &mut r);
    let w = random(spec.weight_shape(), &mut r);
    let b = spec.has_bias.then(|| random(Shape::vector(spec.out_channels), &mut r));
    let fast = conv2d(&x, &w, b.as_ref(), &spec).unwrap();
    let slow = conv_oracle(&x, &w, b.as_ref(), &spec);
    assert_eq!(fast.shape(), slow.shape(), "{spec:?}");
    fast.max_abs_diff(&slow).unwrap()
}

#[test]
fn grouped_conv_matches_direct_sum() {
    let spec = ConvSpec::same(4, 4, (3, 3)).with_groups(2);
    let diff = check_conv(spec, Shape::new(2, 4, 9, 9), 11);
    assert!(diff < 1e-6, "{diff}");
}

#[test]
fn every_network_kernel_shape_matches_direct_sum() {
    let mut specs = vec![
        ConvSpec::pointwise(6, 10),
        ConvSpec::same(12, 8, (3, 3)),
        ConvSpec::same(8, 48, (3, 3)),
        ConvSpec::new(6, 12, (2, 2)).with_stride((2, 2)),
        ConvSpec::same(3, 32, (3, 3)).with_stride((2, 2)),
        ConvSpec::depthwise(6, (3, 3), 1).with_bias(true),
        ConvSpec::depthwise(6, (5, 5), 1).with_bias(true),
        ConvSpec::depthwise(6, (7, 7), 3).with_bias(true),
        ConvSpec::depthwise(6, (1, 1), 1),
        ConvSpec::same(6, 6, (3, 3)).with_groups(3),
        ConvSpec::depthwise(6, (3, 3), 1).with_stride((2, 2)),
    ];
    for d in [1, 4, 7, 9] {
        specs.push(ConvSpec::depthwise(6, (3, 3), d));
    }
    for k in [1, 3, 7, 11] {
        specs.push(ConvSpec::depthwise(6, (k, k), 1));
        specs.push(ConvSpec::depthwise(6, (k, 1), 1));
        specs.push(ConvSpec::depthwise(6, (1, k), 1));
    }
    for (i, spec) in specs.into_iter().enumerate() {
        for (h, w) in [(12, 12), (7, 10)] {
            let diff = check_conv(spec, Shape::new(2, spec.in_channels, h, w), 100 + i as u64);
            assert!(diff < 1e-6, "{spec:?} at {h}x{w}: {diff}");
        }
    }
}

#[test]
fn large_bottleneck_kernels_match_direct_sum() {
    for spec in [
        ConvSpec::depthwise(4, (23, 23), 1),
        ConvSpec::depthwise(4, (23, 1), 1),
        ConvSpec::depthwise(4, (1, 23), 1),
    ] {
        let diff = check_conv(spec, Shape::new(1, 4, 24, 24), 7);
        assert!(diff < 1e-6, "{spec:?}: {diff}");
    }
}

#[test]
fn bilinear_matches_scalar_formula() {
    let mut r = rng(3);
    let x = random(Shape::new(2, 3, 7, 5), &mut r);
    for (oh, ow) in [(3, 2), (14, 10), (4, 9), (1, 1), (7, 11)] {
        let y = bilinear_resize(&x, oh, ow, &mut 0).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for i in 0..oh {
                    for j in 0..ow {
                        let sy = ((i as f64 + 0.5) * 7.0 / oh as f64 - 0.5).max(0.0);
                        let sx = ((j as f64 + 0.5) * 5.0 / ow as f64 - 0.5).max(0.0);
                        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(6), (x0 + 1).min(4));
                        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                        let v = x.at(n, c, y0, x0) * (1.0 - fy) * (1.0 - fx)
                            + x.at(n, c, y0, x1) * (1.0 - fy) * fx
                            + x.at(n, c, y1, x0) * fy * (1.0 - fx)
                            + x.at(n, c, y1, x1) * fy * fx;
                        assert!((y.at(n, c, i, j) - v).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn pooling_matches_loops() {
    let mut r = rng(4);
    let x = random(Shape::new(2, 3, 6, 9), &mut r);
    let g = global_avg_pool(&x, &mut 0);
    for n in 0..2 {
        for c in 0..3 {
            let mut s = 0.0;
            for h in 0..6 {
                for w in 0..9 {
                    s += x.at(n, c, h, w);
                }
            }
            assert!((g.at(n, c, 0, 0) - s / 54.0).abs() < 1e-12);
        }
    }
    for (kh, kw) in [(3, 3), (4, 5), (6, 2), (1, 9)] {
        let l = local_avg_pool(&x, kh, kw, &mut 0).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..6 {
                    for w in 0..9 {
                        let h0 = (h as i64 - (kh / 2) as i64).clamp(0, (6 - kh) as i64) as usize;
                        let w0 = (w as i64 - (kw / 2) as i64).clamp(0, (9 - kw) as i64) as usize;
                        let mut s = 0.0;
                        for a in h0..h0 + kh {
                            for b in w0..w0 + kw {
                                s += x.at(n, c, a, b);
                            }
                        }
                        let want = s / (kh * kw) as f64;
                        assert!((l.at(n, c, h, w) - want).abs() < 1e-12, "{kh}x{kw}");
                    }
                }
            }
        }
    }
}

#[test]
fn conv_is_bit_deterministic() {
    let mut r = rng(5);
    let x = random(Shape::new(2, 8, 16, 16), &mut r);
    for spec in [
        ConvSpec::pointwise(8, 16),
        ConvSpec::depthwise(8, (3, 3), 4),
        ConvSpec::same(8, 4, (3, 3)),
    ] {
        let w = random(spec.weight_shape(), &mut r);
        let b = spec.has_bias.then(|| random(Shape::vector(spec.out_channels), &mut r));
        let a = conv2d(&x, &w, b.as_ref(), &spec).unwrap();
        let c = conv2d(&x, &w, b.as_ref(), &spec).unwrap();
        assert_eq!(a.data(), c.data());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear(seed in 0u64..1000, ka in -2.0f64..2.0, kb in -2.0f64..2.0, which in 0usize..4) {
        let spec = [
            ConvSpec::pointwise(4, 6),
            ConvSpec::depthwise(4, (3, 3), 2),
            ConvSpec::same(4, 4, (3, 3)).with_groups(2).with_bias(false),
            ConvSpec::new(4, 8, (2, 2)).with_stride((2, 2)),
        ][which].with_bias(false);
        let mut r = rng(seed);
        let x = random(Shape::new(1, 4, 8, 6), &mut r);
        let y = random(Shape::new(1, 4, 8, 6), &mut r);
        let w = random(spec.weight_shape(), &mut r);
        let mix = x.zip_map(&y, |a, b| ka * a + kb * b).unwrap();
        let lhs = conv2d(&mix, &w, None, &spec).unwrap();
        let cx = conv2d(&x, &w, None, &spec).unwrap();
        let cy = conv2d(&y, &w, None, &spec).unwrap();
        let rhs = cx.zip_map(&cy, |a, b| ka * a + kb * b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-6);
    }

    #[test]
    fn shuffle_inverts_unshuffle(seed in 0u64..1000, n in 1usize..3, c in 1usize..4, bh in 1usize..5, bw in 1usize..5, r in 1usize..4) {
        let mut g = rng(seed);
        let x = random(Shape::new(n, c, bh * r, bw * r), &mut g);
        let y = pixel_unshuffle(&x, r).unwrap();
        prop_assert_eq!(y.shape(), Shape::new(n, c * r * r, bh, bw));
        prop_assert_eq!(pixel_shuffle(&y, r).unwrap(), x.clone());
        let z = random(Shape::new(n, c * r * r, bh, bw), &mut g);
        prop_assert_eq!(pixel_unshuffle(&pixel_shuffle(&z, r).unwrap(), r).unwrap(), z);
    }
}

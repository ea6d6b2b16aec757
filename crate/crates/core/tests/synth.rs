use mznet::dataset::{load_dataset, make_dataset, read_manifest, DatasetOptions, Preset, INSPECTION_NOISE_AMP};
use mznet::image::{decode_ppm, encode_ppm, read_ppm};
use mznet::metrics::psnr;
use mznet::synth::{
    estimate_translation, gaussian_blur, generate_pair, inject_misalignment, procedural_scene, shift, SynthRanges,
    SynthSpec,
};
use mznet_tensor::{Shape, Tensor};
use proptest::prelude::*;

fn scene(seed: u64, side: usize) -> Tensor {
    procedural_scene(seed, side, side)
}

fn spec(seed: u64) -> SynthSpec {
    SynthRanges::default().sample(seed)
}

fn channel_variance(img: &Tensor, c: usize) -> f64 {
    let p = img.plane(0, c);
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p.len() as f64
}

fn interior_max_diff(a: &Tensor, b: &Tensor, margin: usize) -> f64 {
    let s = a.shape();
    let mut worst: f64 = 0.0;
    for c in 0..s.c {
        for i in margin..s.h - margin {
            for j in margin..s.w - margin {
                worst = worst.max((a.at(0, c, i, j) - b.at(0, c, i, j)).abs());
            }
        }
    }
    worst
}

#[test]
fn generation_is_deterministic_and_leaves_clean_untouched() {
    let clean = scene(1, 96);
    let before = clean.clone();
    let a = generate_pair(&clean, &spec(5)).unwrap();
    let b = generate_pair(&clean, &spec(5)).unwrap();
    assert_eq!(a, b);
    assert_eq!(clean, before);
    assert_eq!(a.clean, clean);
    assert_eq!(a.moire.shape(), clean.shape());
    assert!(a.moire.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(generate_pair(&clean, &spec(6)).unwrap().moire, a.moire);
}

#[test]
fn spec_sampling_is_seeded_and_in_range() {
    let r = SynthRanges::default();
    for seed in 0..50 {
        let s = r.sample(seed);
        assert_eq!(s, r.sample(seed));
        s.validate().unwrap();
    }
}

#[test]
fn out_of_range_specs_are_rejected() {
    let clean = scene(1, 64);
    let base = spec(1);
    let bad = [
        SynthSpec {
            display_period: 7.0,
            ..base.clone()
        },
        SynthSpec {
            rotation_deg: 20.0,
            ..base.clone()
        },
        SynthSpec {
            blur_sigma: 0.1,
            ..base.clone()
        },
        SynthSpec {
            cfa_stride: 4,
            ..base.clone()
        },
        SynthSpec {
            color_gain: [2.0, 1.0, 1.0],
            ..base.clone()
        },
        SynthSpec {
            misalign: Some((17.0, 0.0)),
            ..base.clone()
        },
    ];
    for s in bad {
        assert!(generate_pair(&clean, &s).is_err(), "{s:?}");
    }
    assert!(generate_pair(&scene(1, 32), &base).is_err(), "too small");
}

#[test]
fn mid_gray_shows_chroma_banding() {
    let gray = Tensor::full(Shape::new(1, 3, 128, 128), 0.5);
    for seed in 0..8 {
        let pair = generate_pair(&gray, &spec(seed)).unwrap();
        for c in 0..3 {
            let v = channel_variance(&pair.moire, c);
            let clean = channel_variance(&gray, c);
            assert!(v >= 10.0 * clean && v >= 1e-4, "seed {seed} channel {c}: variance {v}");
        }
    }
}

#[test]
fn moire_is_a_material_degradation_on_the_seed_sweep() {
    let mut total = 0.0;
    for seed in 0..16 {
        let clean = scene(1000 + seed, 128);
        let pair = generate_pair(&clean, &spec(seed)).unwrap();
        let p = psnr(&pair.moire, &pair.clean).unwrap();
        assert!(p < 40.0, "seed {seed}: {p} dB");
        total += p;
    }
    let mean = total / 16.0;
    assert!(mean < 28.0, "mean input PSNR {mean} dB");
}

#[test]
fn zero_misalignment_leaves_the_pair_unchanged() {
    let pair = generate_pair(&scene(2, 64), &spec(2)).unwrap();
    let moved = inject_misalignment(&pair, 0.0, 0.0).unwrap();
    assert_eq!(moved.moire, pair.moire);
    assert_eq!(moved.true_offset, Some((0.0, 0.0)));
    assert!(inject_misalignment(&pair, 16.5, 0.0).is_err());
}

#[test]
fn integer_shift_round_trips_exactly_away_from_borders() {
    let img = scene(3, 64);
    let back = shift(&shift(&img, 5.0, -3.0), -5.0, 3.0);
    assert!(interior_max_diff(&back, &img, 5) < 1e-6);
    // integer shifts copy samples
    let s = shift(&img, 5.0, -3.0);
    assert_eq!(s.at(0, 1, 10, 20), img.at(0, 1, 13, 15));
}

#[test]
fn subpixel_shift_round_trips_within_interpolation_tolerance() {
    // the round trip error is a quarter of the horizontal second
    // difference, so the tolerance holds on photo-smooth content
    let mut checked = 0;
    for seed in 0..16 {
        let img = gaussian_blur(&scene(seed, 128), 2.0);
        let back = shift(&shift(&img, 2.5, 0.0), -2.5, 0.0);
        let err = interior_max_diff(&back, &img, 4);
        let s = img.shape();
        let mut curvature: f64 = 0.0;
        for c in 0..3 {
            for i in 4..s.h - 4 {
                for j in 4..s.w - 4 {
                    let d2 = img.at(0, c, i, j - 1) - 2.0 * img.at(0, c, i, j) + img.at(0, c, i, j + 1);
                    curvature = curvature.max(d2.abs());
                }
            }
        }
        assert!(err <= 0.25 * curvature + 1e-12, "seed {seed}");
        if curvature <= 0.08 {
            checked += 1;
            assert!(err < 2e-2, "seed {seed}: {err}");
        }
    }
    assert!(checked >= 8, "only {checked} smooth scenes");
}

#[test]
fn half_pixel_round_trip_equals_a_121_smoothing() {
    let img = scene(4, 64);
    let back = shift(&shift(&img, 2.5, 0.0), -2.5, 0.0);
    let want = Tensor::from_fn(img.shape(), |n, c, i, j| {
        let j = j.clamp(1, 62);
        0.25 * img.at(n, c, i, j - 1) + 0.5 * img.at(n, c, i, j) + 0.25 * img.at(n, c, i, j + 1)
    });
    assert!(interior_max_diff(&back, &want, 4) < 1e-12);
}

#[test]
fn translation_of_identical_images_is_zero() {
    let img = scene(5, 96);
    let t = estimate_translation(&img, &img, 8).unwrap();
    assert_eq!(t.peak, (0, 0));
    assert!(t.dx.abs() < 1e-9 && t.dy.abs() < 1e-9);
}

#[test]
fn translation_recovers_integer_and_subpixel_offsets() {
    let img = gaussian_blur(&scene(6, 128), 0.7);
    let t = estimate_translation(&img, &shift(&img, 5.0, -3.0), 8).unwrap();
    assert_eq!((t.dx, t.dy), (5.0, -3.0));
    let t = estimate_translation(&img, &shift(&img, 2.5, 1.25), 8).unwrap();
    assert!((t.dx - 2.5).abs() < 0.5 && (t.dy - 1.25).abs() < 0.5, "{t:?}");
}

#[test]
fn translation_of_constant_image_is_an_error() {
    let flat = Tensor::full(Shape::new(1, 3, 64, 64), 0.3);
    assert!(estimate_translation(&flat, &flat, 4).is_err());
    let img = scene(7, 64);
    assert!(estimate_translation(&img, &scene(7, 96), 4).is_err());
    assert!(estimate_translation(&img, &img, 17).is_err());
}

#[test]
fn ppm_round_trip_is_exact_for_8_bit_values() {
    let img = Tensor::from_fn(Shape::new(1, 3, 5, 7), |_, c, i, j| {
        ((c * 35 + i * 7 + j) % 256) as f64 / 255.0
    });
    let bytes = encode_ppm(&img).unwrap();
    assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
    let back = decode_ppm(&bytes, std::path::Path::new("x.ppm")).unwrap();
    assert!(back.max_abs_diff(&img).unwrap() < 1e-12);
    assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0", std::path::Path::new("x.ppm")).is_err());
    assert!(decode_ppm(&bytes[..bytes.len() - 1], std::path::Path::new("x.ppm")).is_err());
}

fn options(preset: Preset, n: usize, seed: u64) -> DatasetOptions {
    DatasetOptions {
        preset,
        n,
        seed,
        size: 64,
        ..DatasetOptions::default()
    }
}

#[test]
fn datasets_are_reproducible_and_complete() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let opts = options(Preset::Procedural, 8, 11);
    let rows = make_dataset(&opts, a.path()).unwrap();
    make_dataset(&opts, b.path()).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(read_manifest(a.path()).unwrap(), rows);
    for name in std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()) {
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name:?}");
    }
    for r in &rows {
        assert_eq!(
            read_ppm(&a.path().join(&r.moire)).unwrap().shape(),
            Shape::new(1, 3, 64, 64)
        );
        read_ppm(&a.path().join(&r.gt)).unwrap();
    }
    assert_eq!(load_dataset(a.path()).unwrap().len(), 8);
}

#[test]
fn natural_preset_needs_a_nonempty_source() {
    let out = tempfile::tempdir().unwrap();
    let empty = tempfile::tempdir().unwrap();
    let mut opts = options(Preset::Natural, 2, 0);
    assert!(make_dataset(&opts, out.path()).is_err());
    opts.clean_dir = Some(empty.path().to_path_buf());
    assert!(make_dataset(&opts, out.path()).is_err());
}

#[test]
fn misaligned_dataset_records_bounded_integer_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let opts = DatasetOptions {
        misalign: 5,
        ..options(Preset::Procedural, 6, 2)
    };
    for row in make_dataset(&opts, dir.path()).unwrap() {
        let (dx, dy) = row.offset.expect("offset recorded");
        assert!(dx.abs() <= 5.0 && dy.abs() <= 5.0 && dx.fract() == 0.0 && dy.fract() == 0.0);
    }
}

#[test]
fn inspection_preset_records_the_noise_rank_order() {
    let dir = tempfile::tempdir().unwrap();
    let rows = make_dataset(&options(Preset::Inspection, 4, 3), dir.path()).unwrap();
    for r in rows {
        let rec = r.inspection.expect("inspection record");
        assert_eq!(rec.noise_amp, INSPECTION_NOISE_AMP);
        let gt = read_ppm(&dir.path().join(&r.gt)).unwrap();
        let g = gt.plane(0, 1);
        assert!(g[rec.brightest] > g[rec.darkest]);
        let max = g.iter().cloned().fold(f64::MIN, f64::max);
        let min = g.iter().cloned().fold(f64::MAX, f64::min);
        assert_eq!(g[rec.brightest], max);
        assert_eq!(g[rec.darkest], min);
        assert!((max - rec.level).abs() <= INSPECTION_NOISE_AMP + 1.0 / 255.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn integer_offsets_are_recovered_exactly(dx in -8i32..=8, dy in -8i32..=8, seed in 0u64..1000) {
        let img = gaussian_blur(&scene(seed, 96), 0.7);
        let t = estimate_translation(&img, &shift(&img, dx as f64, dy as f64), 8).unwrap();
        prop_assert_eq!(t.peak, (dx as i64, dy as i64));
        prop_assert!((t.dx - dx as f64).abs() < 1e-9 && (t.dy - dy as f64).abs() < 1e-9);
    }

    #[test]
    fn generated_pairs_stay_in_range(seed in 0u64..10_000) {
        let pair = generate_pair(&scene(seed, 64), &spec(seed)).unwrap();
        prop_assert!(pair.moire.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

mod common;

use std::collections::BTreeMap;

use common::*;
use mznet::checkpoint::Checkpoint;
use mznet::dataset::Sample;
use mznet::gradcheck::fd_check;
use mznet::loss::{loss_total, supervised_loss, PerceptualProxy};
use mznet::optim::{cosine_lr, Adam, AdamConfig};
use mznet::synth::{generate_pair, procedural_scene, shift, SynthRanges};
use mznet::train::TrainConfig;
use mznet::train::{realign, run, Trainer, CHECKPOINT_FILE, LOG_FILE, LOG_HEADER};
use mznet::{Error, Model, ModelConfig, Params};
use mznet_tensor::{Shape, Tape, Tensor, Var};
use proptest::prelude::*;

fn samples(n: usize, side: usize, seed: u64) -> Vec<Sample> {
    let ranges = SynthRanges::default();
    (0..n)
        .map(|i| {
            let s = seed * 1000 + i as u64;
            let pair = generate_pair(&procedural_scene(s, side, side), &ranges.sample(s)).unwrap();
            Sample {
                id: format!("{i:05}"),
                moire: pair.moire,
                gt: pair.clean,
                offset: None,
            }
        })
        .collect()
}

#[test]
fn realign_undoes_integer_offsets_without_resampling() {
    let aligned = samples(4, 96, 12);
    let offsets = [(3.0, -5.0), (-4.0, 0.0), (0.0, 2.0), (5.0, 5.0)];
    let moved: Vec<Sample> = aligned
        .iter()
        .zip(offsets)
        .map(|(s, (dx, dy))| Sample {
            moire: shift(&s.moire, dx, dy),
            offset: Some((dx, dy)),
            ..s.clone()
        })
        .collect();
    let fixed = realign(&moved, 8).unwrap();
    for (orig, back) in aligned.iter().zip(&fixed) {
        assert_eq!(back.gt, orig.gt);
        for c in 0..3 {
            for i in 8..88 {
                for j in 8..88 {
                    assert_eq!(
                        back.moire.at(0, c, i, j),
                        orig.moire.at(0, c, i, j),
                        "{} at ({c},{i},{j})",
                        orig.id
                    );
                }
            }
        }
    }
}

fn tiny_model(crop: usize, seed: u64) -> Model {
    Model::build(&ModelConfig::tiny().with_crop(crop, crop).unwrap(), seed).unwrap()
}

fn config(epochs: u64, batch: usize, crop: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: batch,
        crop,
        lr_init: 1e-3,
        lambda_perceptual: 0.0,
        ..TrainConfig::default()
    }
}

fn adam_config() -> AdamConfig {
    AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    }
}

#[test]
fn loss_is_zero_when_predictions_match_scaled_targets() {
    let gt = random_image(Shape::new(2, 3, 64, 64), &mut rng(1));
    let mut tape = Tape::new();
    let full = Var::constant(gt.clone());
    let preds = vec![
        full.clone(),
        tape.resize(&full, 32, 32).unwrap(),
        tape.resize(&full, 16, 16).unwrap(),
    ];
    let proxy = PerceptualProxy::new(3);
    let parts = loss_total(&mut tape, &preds, &gt, &[1.0; 3], 1.0, &proxy).unwrap();
    assert_eq!(parts.total.item(), 0.0);
    assert_eq!(parts.l1, 0.0);
    assert_eq!(parts.perceptual, 0.0);
}

#[test]
fn l1_of_a_constant_offset_is_the_offset() {
    let gt = random_image(Shape::new(1, 3, 32, 32), &mut rng(2));
    let mut tape = Tape::new();
    let pred = Var::constant(gt.map(|v| v + 0.1));
    let parts = supervised_loss(&mut tape, &[pred], &[gt], &[1.0], 0.0, &PerceptualProxy::new(0)).unwrap();
    assert!((parts.total.item() - 0.1).abs() < 1e-12);
}

#[test]
fn loss_rejects_mismatched_shapes() {
    let mut tape = Tape::new();
    let pred = Var::constant(Tensor::zeros(Shape::new(1, 3, 32, 32)));
    let gt = Tensor::zeros(Shape::new(1, 3, 16, 16));
    assert!(supervised_loss(&mut tape, &[pred], &[gt], &[1.0], 0.0, &PerceptualProxy::new(0)).is_err());
}

#[test]
fn deep_supervised_loss_gradient_matches_finite_differences() {
    let model = tiny_model(32, 4);
    let mut values = model.params.clone();
    let mut r = rng(5);
    for (_, t) in values.iter_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.1 * (rand::Rng::gen_range(&mut r, -1.0..1.0)));
    }
    let input = random_image(Shape::new(1, 3, 32, 32), &mut r);
    let gt = zip(&input, &random(input.shape(), &mut r), |x, e| x + 0.1 * e);
    values.insert("input", input).unwrap();
    let proxy = PerceptualProxy::new(6);
    let m = model.clone();
    let f = move |ctx: &mut mznet::Ctx| {
        let x = ctx.param("input")?;
        let out = m.forward(ctx, &x)?;
        Ok(loss_total(ctx.tape, &out.preds, &gt, &[1.0, 0.5, 0.25], 0.7, &proxy)?.total)
    };
    let probes = fd_check(&values, 24, &mut r, &f).unwrap();
    for p in probes {
        assert!(p.rel_err < 1e-4, "{p:?}");
    }
}

#[test]
fn proxy_distance_is_zero_symmetric_and_monotone_in_noise() {
    let proxy = PerceptualProxy::new(7);
    let a = random_image(Shape::new(1, 3, 64, 64), &mut rng(8));
    let noise = random(a.shape(), &mut rng(9));
    let dist = |x: &Tensor, y: &Tensor| {
        let mut tape = Tape::new();
        proxy
            .distance(&mut tape, &Var::constant(x.clone()), &Var::constant(y.clone()))
            .unwrap()
            .item()
    };
    assert_eq!(dist(&a, &a), 0.0);
    let b = zip(&a, &noise, |x, e| x + 0.05 * e);
    assert_eq!(dist(&a, &b), dist(&b, &a));
    let mut last = 0.0;
    for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
        let d = dist(&a, &zip(&a, &noise, |x, e| x + amp * e));
        assert!(d > last, "amp {amp}: {d} <= {last}");
        last = d;
    }
}

#[test]
fn proxy_is_seeded() {
    let a = random_image(Shape::new(1, 3, 32, 32), &mut rng(10));
    let b = random_image(Shape::new(1, 3, 32, 32), &mut rng(11));
    let d = |seed| {
        let mut tape = Tape::new();
        PerceptualProxy::new(seed)
            .distance(&mut tape, &Var::constant(a.clone()), &Var::constant(b.clone()))
            .unwrap()
            .item()
    };
    assert_eq!(d(1), d(1));
    assert_ne!(d(1), d(2));
}

fn scalar_params(p: f64) -> Params {
    let mut params = Params::new();
    params.insert("p", Tensor::scalar(p)).unwrap();
    params
}

fn grad_of(g: f64) -> BTreeMap<String, Tensor> {
    BTreeMap::from([("p".to_string(), Tensor::scalar(g))])
}

#[test]
fn adam_with_zero_gradient_leaves_parameters_and_advances_t() {
    let mut params = scalar_params(0.3);
    let mut adam = Adam::new(adam_config());
    adam.step(&mut params, &grad_of(0.0), 1e-2).unwrap();
    adam.step(&mut params, &BTreeMap::new(), 1e-2).unwrap();
    assert_eq!(params.get("p").unwrap().data()[0], 0.3);
    assert_eq!(adam.t, 2);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut params = scalar_params(1.0);
    let mut adam = Adam::new(adam_config());
    adam.step(&mut params, &grad_of(1.0), 0.01).unwrap();
    let want = 1.0 - 0.01 * 1.0 / (1.0 + 1e-8);
    assert!((params.get("p").unwrap().data()[0] - want).abs() < 1e-15);
}

#[test]
fn adam_matches_a_hand_trace_on_a_quadratic() {
    // f(p) = p²/2, g = p, β1 0.9, β2 0.999, ε 1e-8, lr 0.1, p0 = 1
    let trace = [0.900_000_001, 0.800_412_229_712_337_9, 0.701_586_274_504_414_7];
    let mut params = scalar_params(1.0);
    let mut adam = Adam::new(adam_config());
    for want in trace {
        let p = params.get("p").unwrap().data()[0];
        adam.step(&mut params, &grad_of(p), 0.1).unwrap();
        let got = params.get("p").unwrap().data()[0];
        assert!(((got - want) / want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn adam_rejects_non_finite_gradients_without_touching_state() {
    let mut params = scalar_params(0.5);
    let mut adam = Adam::new(adam_config());
    let err = adam.step(&mut params, &grad_of(f64::NAN), 0.1).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGrad(_)));
    assert_eq!(adam.t, 0);
    assert_eq!(params.get("p").unwrap().data()[0], 0.5);
}

#[test]
fn cosine_schedule_endpoints_and_midpoint() {
    assert_eq!(cosine_lr(0, 100, 2e-4, 1e-6).unwrap(), 2e-4);
    assert!((cosine_lr(100, 100, 2e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-18);
    assert!((cosine_lr(50, 100, 2e-4, 1e-6).unwrap() - (2e-4 + 1e-6) / 2.0).abs() < 1e-18);
    assert!(cosine_lr(101, 100, 2e-4, 1e-6).is_err());
    assert!(cosine_lr(0, 0, 2e-4, 1e-6).is_err());
}

#[test]
fn gradient_accumulation_equals_one_large_batch() {
    let data = samples(4, 64, 1);
    let model = tiny_model(64, 2);
    let big_cfg = TrainConfig {
        flips: false,
        lambda_perceptual: 0.5,
        ..config(1, 4, 64)
    };
    let small_cfg = TrainConfig {
        batch_size: 2,
        grad_accum_steps: 2,
        ..big_cfg.clone()
    };
    let mut big = Trainer::new(model.clone(), big_cfg, &data).unwrap();
    let mut small = Trainer::new(model, small_cfg, &data).unwrap();

    let (x, y) = big.batch(0).unwrap();
    let (g_big, _) = big.gradients(&x, &y, 1.0).unwrap();
    let mut g_sum: BTreeMap<String, Tensor> = BTreeMap::new();
    for micro in 0..2 {
        let (x, y) = small.batch(micro).unwrap();
        for (path, g) in small.gradients(&x, &y, 0.5).unwrap().0 {
            match g_sum.get_mut(&path) {
                Some(t) => t.axpy(1.0, &g).unwrap(),
                None => {
                    g_sum.insert(path, g);
                }
            }
        }
    }
    assert_eq!(g_big.len(), g_sum.len());
    for (path, g) in &g_big {
        let d = g.max_abs_diff(&g_sum[path]).unwrap();
        assert!(d < 1e-10, "{path}: {d} of {:?}", &g.data()[..3]);
    }

    let a = big.train_step().unwrap();
    let b = small.train_step().unwrap();
    assert!((a.total - b.total).abs() < 1e-10);
    for (path, p) in big.model.params.iter() {
        assert!(
            p.max_abs_diff(small.model.params.get(path).unwrap()).unwrap() < 1e-10,
            "{path}"
        );
    }
}

#[test]
fn identical_runs_write_identical_logs_and_checkpoints() {
    let data = samples(4, 64, 2);
    let cfg = config(2, 2, 32);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let mut t = Trainer::new(tiny_model(32, 3), cfg.clone(), &data).unwrap();
        run(&mut t, dir.path(), |_| {}).unwrap();
    }
    for f in [LOG_FILE, CHECKPOINT_FILE] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(a.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().next(), Some(LOG_HEADER));
    assert_eq!(log.lines().count(), 1 + 4);
}

#[test]
fn resume_continues_the_schedule_and_matches_an_uninterrupted_run() {
    let data = samples(4, 64, 3);
    let full_cfg = config(4, 2, 32);
    let straight = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny_model(32, 4), full_cfg.clone(), &data).unwrap();
    let rows = run(&mut t, straight.path(), |_| {}).unwrap();

    // stop after two epochs, then resume under the full schedule
    let split = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(tiny_model(32, 4), full_cfg.clone(), &data).unwrap();
    for _ in 0..4 {
        first.train_step().unwrap();
    }
    first.checkpoint().save(&split.path().join(CHECKPOINT_FILE)).unwrap();
    let ckpt = Checkpoint::load(&split.path().join(CHECKPOINT_FILE)).unwrap();
    let mut resumed = Trainer::resume(&ckpt, full_cfg, &data).unwrap();
    assert_eq!(resumed.step, 4);
    let rest = run(&mut resumed, split.path(), |_| {}).unwrap();
    assert_eq!(rest.first().unwrap().step, 4);
    assert_eq!(rest.first().unwrap().lr, rows[4].lr);
    assert_eq!(rest, rows[4..].to_vec());
    assert_eq!(resumed.model, t.model);
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_checkpoint() {
    let good = samples(4, 64, 4);
    let cfg = config(3, 2, 32);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(
        tiny_model(32, 5),
        TrainConfig {
            epochs: 1,
            ..cfg.clone()
        },
        &good,
    )
    .unwrap();
    run(&mut t, dir.path(), |_| {}).unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    let before = std::fs::read(&path).unwrap();

    let mut bad = good.clone();
    for s in &mut bad {
        s.moire = s.moire.map(|_| f64::NAN);
    }
    let ckpt = Checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::resume(&ckpt, cfg, &bad).unwrap();
    let err = run(&mut resumed, dir.path(), |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss(2)), "{err}");
    assert_eq!(std::fs::read(&path).unwrap(), before);
    assert_eq!(resumed.step, 2);
}

#[test]
fn trainer_rejects_unusable_configurations() {
    let data = samples(3, 64, 5);
    let model = tiny_model(32, 0);
    assert!(
        Trainer::new(model.clone(), config(1, 4, 32), &data).is_err(),
        "batch larger than data"
    );
    assert!(
        Trainer::new(model.clone(), config(1, 2, 48), &data).is_err(),
        "crop not a multiple of 32"
    );
    let bad_lr = TrainConfig {
        lr_min: 1.0,
        ..config(1, 1, 32)
    };
    assert!(Trainer::new(model, bad_lr, &data).is_err());
}

#[test]
fn a_short_run_reduces_the_training_loss() {
    let data = samples(4, 64, 6);
    let cfg = TrainConfig {
        flips: false,
        ..config(30, 4, 32)
    };
    let mut t = Trainer::new(tiny_model(32, 6), cfg, &data).unwrap();
    let first = t.train_step().unwrap();
    let mut last = first.clone();
    while !t.is_done() {
        last = t.train_step().unwrap();
    }
    assert!(last.l1 < first.l1, "{} -> {}", first.l1, last.l1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cosine_schedule_is_monotone_and_bounded(total in 1u64..500, lr in 1e-5f64..1e-2) {
        let lr_min = 1e-6;
        let mut last = f64::INFINITY;
        for step in 0..=total {
            let v = cosine_lr(step, total, lr, lr_min).unwrap();
            prop_assert!(v <= last && v >= lr_min - 1e-18 && v <= lr);
            last = v;
        }
    }

    #[test]
    fn adam_matches_the_textbook_update(g in proptest::collection::vec(-3.0f64..3.0, 1..6), lr in 1e-4f64..1e-1) {
        let cfg = adam_config();
        let mut params = scalar_params(0.0);
        let mut adam = Adam::new(cfg);
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 0.0f64);
        for (t, &gi) in g.iter().enumerate() {
            let t = t as i32 + 1;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * gi;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * gi * gi;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            p -= lr * mh / (vh.sqrt() + cfg.eps);
            adam.step(&mut params, &grad_of(gi), lr).unwrap();
            let got = params.get("p").unwrap().data()[0];
            prop_assert!((got - p).abs() <= 1e-12 * p.abs().max(1e-300) || got == p);
        }
    }

    #[test]
    fn l1_loss_is_zero_only_for_exact_predictions(seed in 0u64..1000, offset in -0.5f64..0.5) {
        let gt = random_image(Shape::new(1, 3, 32, 32), &mut rng(seed));
        let mut tape = Tape::new();
        let pred = Var::constant(gt.map(|v| v + offset));
        let total = supervised_loss(&mut tape, &[pred], &[gt], &[1.0], 0.0, &PerceptualProxy::new(0))
            .unwrap()
            .total
            .item();
        prop_assert!((total - offset.abs()).abs() < 1e-12);
        prop_assert_eq!(total == 0.0, offset == 0.0);
    }
}

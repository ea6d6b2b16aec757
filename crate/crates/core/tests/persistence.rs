mod common;

use common::*;
use mznet::checkpoint::{Checkpoint, MAGIC, VERSION};
use mznet::config::{parse_override, parse_pairs, RunConfig, PRESETS};
use mznet::optim::{Adam, AdamConfig};
use mznet::{Error, KernelSize, Model, ModelConfig};
use mznet_tensor::{Shape, Tensor};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn tiny_model(seed: u64) -> Model {
    let config = ModelConfig::tiny().with_crop(64, 64).unwrap();
    Model::build(&config, seed).unwrap()
}

fn trained_adam(model: &Model) -> Adam {
    let mut adam = Adam::new(AdamConfig {
        beta1: 0.9,
        beta2: 0.99,
        eps: 1e-8,
    });
    let mut params = model.params.clone();
    let mut r = rng(9);
    let grads: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(p, t)| (p.to_string(), random(t.shape(), &mut r)))
        .collect();
    adam.step(&mut params, &grads, 1e-3).unwrap();
    adam
}

fn with_crc(mut body: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    body
}

fn reseal(bytes: &[u8]) -> Vec<u8> {
    with_crc(bytes[..bytes.len() - 4].to_vec())
}

fn is_checkpoint_error(r: Result<Checkpoint, Error>, needle: &str) -> bool {
    matches!(r, Err(Error::Checkpoint(msg)) if msg.contains(needle))
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = tiny_model(3);
    let adam = trained_adam(&model);
    let ck = Checkpoint::from_state(&model, Some(&adam), 17, 41);
    let bytes = ck.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.encode(), bytes);
    let restored = back.model().unwrap();
    assert_eq!(restored.config, model.config);
    for (p, t) in model.params.iter() {
        let r = restored.params.get(p).unwrap();
        assert!(
            t.data().iter().zip(r.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "{p}"
        );
    }
    let a = back.adam(adam.config);
    assert_eq!(a.t, 17);
    assert_eq!(a.m, adam.m);
    assert_eq!(a.v, adam.v);
}

#[test]
fn checkpoint_save_and_load_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ck = Checkpoint::from_state(&tiny_model(5), None, 0, 0);
    ck.save(&path).unwrap();
    assert!(!path.with_extension("tmp").exists());
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    assert!(matches!(
        Checkpoint::load(&dir.path().join("absent")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = Checkpoint::from_state(&tiny_model(1), None, 2, 3).encode();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(is_checkpoint_error(Checkpoint::decode(&bad_magic), "magic"));

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(is_checkpoint_error(Checkpoint::decode(&flipped), "CRC"));

    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(is_checkpoint_error(Checkpoint::decode(&reseal(&version)), "version"));

    let truncated = with_crc(bytes[..bytes.len() - 100].to_vec());
    assert!(is_checkpoint_error(Checkpoint::decode(&truncated), "truncated"));

    let mut trailing = bytes[..bytes.len() - 4].to_vec();
    trailing.extend_from_slice(&[0, 0, 0]);
    assert!(is_checkpoint_error(Checkpoint::decode(&with_crc(trailing)), "trailing"));

    assert!(Checkpoint::decode(&[]).is_err());
    assert!(Checkpoint::decode(MAGIC).is_err());
}

/// Hand-assembled file with a single f32 tensor and an empty model config.
fn f32_checkpoint(values: &[f32]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&7u64.to_le_bytes());
    out.extend_from_slice(&11u64.to_le_bytes());
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&1u32.to_le_bytes());
    out.push(b'w');
    out.push(1);
    out.push(4);
    for d in [1u64, 1, 1, values.len() as u64] {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    with_crc(out)
}

#[test]
fn f32_tensors_are_widened_on_load() {
    let values = [0.1f32, -2.5, 3.0e-7];
    let ck = Checkpoint::decode(&f32_checkpoint(&values)).unwrap();
    assert_eq!((ck.step, ck.proxy_seed), (7, 11));
    let (path, t) = &ck.tensors[0];
    assert_eq!(path, "w");
    assert_eq!(t.shape(), Shape::new(1, 1, 1, 3));
    let expect: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    assert_eq!(t.data(), &expect[..]);
}

#[test]
fn unknown_dtype_and_rank_are_rejected() {
    let good = f32_checkpoint(&[1.0]);
    let dtype_at = 4 + 4 + 4 + 8 + 8 + 4 + 4 + 1;
    let mut dtype = good.clone();
    dtype[dtype_at] = 7;
    assert!(is_checkpoint_error(Checkpoint::decode(&reseal(&dtype)), "dtype"));
    let mut rank = good;
    rank[dtype_at + 1] = 3;
    assert!(is_checkpoint_error(Checkpoint::decode(&reseal(&rank)), "rank"));
}

#[test]
fn presets_carry_their_documented_values() {
    for name in PRESETS {
        RunConfig::preset(name).unwrap().validate().unwrap();
    }
    let u = RunConfig::preset("uhdm").unwrap();
    assert_eq!(
        (u.train.crop, u.train.batch_size, u.train.grad_accum_steps),
        (768, 2, 4)
    );
    assert_eq!(u.train.lr_init, 6e-4);
    assert_eq!(u.train.epochs, 700);
    assert_eq!(
        (u.train.adam_beta1, u.train.adam_beta2, u.train.adam_eps),
        (0.9, 0.9, 1e-8)
    );
    assert_eq!(u.resolved_model().unwrap().mslkb_kernel, KernelSize::Fixed(23));

    let f = RunConfig::preset("fhdmi").unwrap();
    assert_eq!((f.train.crop, f.train.batch_size, f.train.lr_init), (512, 4, 4e-4));
    assert_eq!(f.resolved_model().unwrap().mslkb_kernel, KernelSize::Fixed(15));

    let t = RunConfig::preset("tip2018").unwrap();
    assert_eq!((t.train.crop, t.train.batch_size, t.train.lr_init), (256, 8, 2e-4));
    assert_eq!(t.model.dilations[3], vec![1, 4, 7]);
    assert_eq!(t.model.dilations[0], vec![1, 4, 7, 9]);
    assert_eq!(t.resolved_model().unwrap().mslkb_kernel, KernelSize::Fixed(7));

    assert!(matches!(RunConfig::preset("nope"), Err(Error::Config(_))));
}

#[test]
fn overrides_apply_and_unknown_keys_fail() {
    let mut c = RunConfig::preset("uhdm").unwrap();
    let (k, v) = parse_override("train.lr_init=1e-4").unwrap();
    c.set(&k, &v).unwrap();
    c.set("model.use_lka", "false").unwrap();
    c.set("model.dilations.2", "1, 3").unwrap();
    c.set("synth.blur_max", "2.5").unwrap();
    assert_eq!(c.train.lr_init, 1e-4);
    assert!(!c.model.use_lka);
    assert_eq!(c.model.dilations[1], vec![1, 3]);
    assert_eq!(c.synth.blur.1, 2.5);

    for key in ["train.learning_rate", "model.widht", "synth.x", "optim.lr", "lr_init"] {
        assert!(
            matches!(c.set(key, "1"), Err(Error::UnknownKey(k)) if k == key),
            "{key}"
        );
    }
    assert!(matches!(c.set("train.crop", "big"), Err(Error::Config(_))));
    assert!(matches!(c.set("model.use_ffsc", "maybe"), Err(Error::Config(_))));
    assert!(matches!(c.set("model.encoder_blocks", "1,2,3"), Err(Error::Config(_))));
    assert!(parse_override("train.crop").is_err());
}

#[test]
fn resolved_text_parses_back_to_the_same_configuration() {
    for name in PRESETS {
        let mut c = RunConfig::preset(name).unwrap();
        c.set("model.use_mslkb", "false").unwrap();
        c.set("train.supervision_weights", "1,0.5,0.25").unwrap();
        let text = c.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, c, "{name}");
        assert_eq!(back.to_text(), text);
    }
}

#[test]
fn model_text_round_trips_and_rejects_foreign_keys() {
    let m = RunConfig::preset("tip2018").unwrap().resolved_model().unwrap();
    assert_eq!(ModelConfig::from_text(&m.to_text()).unwrap(), m);
    assert!(matches!(
        ModelConfig::from_text("train.crop = 64"),
        Err(Error::UnknownKey(_))
    ));
}

#[test]
fn parse_errors_report_line_numbers() {
    let text = "# header\nmodel.base_width = 8\n\nthis line has no equals\n";
    match parse_pairs(text) {
        Err(Error::Config(msg)) => assert!(msg.contains("line 4"), "{msg}"),
        other => panic!("{other:?}"),
    }
    match parse_pairs("a = 1\n = 2\n") {
        Err(Error::Config(msg)) => assert!(msg.contains("line 2"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let pairs = parse_pairs("a = 1 # trailing\n  b=two words  \n").unwrap();
    assert_eq!(pairs, vec![("a".into(), "1".into()), ("b".into(), "two words".into())]);
}

#[test]
fn invalid_combinations_fail_validation() {
    let mut c = RunConfig::preset("desk").unwrap();
    c.set("train.crop", "100").unwrap();
    assert!(c.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn any_tensor_set_round_trips(seed in 0u64..1000, step in 0u64..u64::MAX, n in 1usize..4) {
        let mut r = rng(seed);
        let tensors: Vec<(String, Tensor)> = (0..n)
            .map(|i| (format!("t{i}"), random(Shape::new(1, i + 1, 2, 3), &mut r)))
            .collect();
        let ck = Checkpoint { model_config: String::new(), step, proxy_seed: seed, tensors };
        prop_assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
    }

    #[test]
    fn any_single_byte_corruption_is_detected(pos in 0usize..10_000, bit in 0u8..8) {
        let bytes = Checkpoint::from_state(&tiny_model(2), None, 1, 1).encode();
        let mut bad = bytes.clone();
        let i = pos % bytes.len();
        bad[i] ^= 1 << bit;
        prop_assert!(Checkpoint::decode(&bad).is_err());
    }
}

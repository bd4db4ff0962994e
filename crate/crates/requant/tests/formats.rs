use proptest::prelude::*;
use requant::artifact::{decode_artifact, encode_artifact, load_artifact, save_artifact, Artifact};
use requant::checkpoint::{decode_calib, decode_checkpoint, encode_calib, encode_checkpoint, Checkpoint};
use requant_core::quant::{self, IntRange, Preprocess, QuantConfig, QuantMode, SparseTriplets, Triplet};
use requant_core::zoo::{self, Generator};
use requant_core::{sensitivity, ComputationSpec, Coord, Error, MetricKind, Nonlinearity, WeightVector};

fn spec(bias: bool) -> ComputationSpec {
    let mut s = ComputationSpec::new(6, vec![5, 4], 3, Nonlinearity::Tanh).unwrap();
    s.bias = bias;
    s
}

fn weights(spec: &ComputationSpec, seed: u64) -> WeightVector {
    let mut w = zoo::init_weights(spec, seed);
    for (j, x) in w.values.iter_mut().enumerate() {
        *x += (j as f64 * 0.37).sin() * 0.01;
    }
    w.round_to_f32();
    w
}

fn calib(seed: u64) -> requant_core::CalibSet {
    zoo::generate_calib(seed, 12, 6, 3, Generator::default()).unwrap()
}

fn artifact(cfg: QuantConfig, bias: bool) -> Artifact {
    let spec = spec(bias);
    let w = weights(&spec, 1);
    let c = calib(1);
    let v = sensitivity::compute_metric(MetricKind::Activation, &spec, &w, &c).unwrap();
    let l = w.layout();
    let outliers = SparseTriplets::from_unsorted(vec![
        Triplet {
            coord: Coord::new(0, 1, 2),
            value: 7.5,
        },
        Triplet {
            coord: Coord::new(2, 0, 3),
            value: -1.25,
        },
    ])
    .unwrap();
    let mut exclude = vec![false; w.len()];
    for t in outliers.iter() {
        exclude[l.flat_index(t.coord).unwrap()] = true;
    }
    let significant = SparseTriplets::from_unsorted(vec![Triplet {
        coord: Coord::new(1, 3, 0),
        value: 0.125,
    }])
    .unwrap();
    let model = quant::quantize_model(&w, &cfg, &v, &exclude)
        .unwrap()
        .with_overlays(outliers, significant)
        .unwrap();
    Artifact { spec, model }
}

fn configs() -> Vec<QuantConfig> {
    vec![
        QuantConfig::default(),
        QuantConfig {
            bits: 2,
            range: IntRange::FullScale,
            mode: QuantMode::UniformGroup { group_size: 4 },
            ..QuantConfig::default()
        },
        QuantConfig {
            bits: 4,
            mode: QuantMode::KMeansCodebook { iters: 15 },
            seed: 9,
            ..QuantConfig::default()
        },
        QuantConfig {
            preprocess: Preprocess::ActivationScale { exponent: 0.5 },
            ..QuantConfig::default()
        },
    ]
}

#[test]
fn artifacts_round_trip_in_every_mode() {
    for cfg in configs() {
        for bias in [true, false] {
            let a = artifact(cfg, bias);
            let bytes = encode_artifact(&a).unwrap();
            let b = decode_artifact(&bytes).unwrap();
            assert_eq!(a, b);
            assert_eq!(encode_artifact(&b).unwrap(), bytes);
            assert_eq!(
                quant::reconstruct(&a.model).unwrap(),
                quant::reconstruct(&b.model).unwrap()
            );
        }
    }
}

#[test]
fn artifact_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/model.rqqt");
    let a = artifact(QuantConfig::default(), true);
    save_artifact(&path, &a).unwrap();
    assert_eq!(load_artifact(&path).unwrap(), a);
    assert_eq!(
        load_artifact(&dir.path().join("missing.rqqt")).unwrap_err().exit_code(),
        3
    );
}

fn assert_all_prefixes_rejected(bytes: &[u8], decode: impl Fn(&[u8]) -> bool) {
    for n in 0..bytes.len() {
        assert!(decode(&bytes[..n]), "prefix of {n} bytes accepted");
    }
    let mut long = bytes.to_vec();
    long.push(0);
    assert!(decode(&long), "trailing byte accepted");
}

fn is_format<T>(r: requant_core::Result<T>) -> bool {
    matches!(r, Err(Error::Format(_)))
}

#[test]
fn truncated_or_padded_artifacts_are_format_errors() {
    let bytes = encode_artifact(&artifact(QuantConfig::default(), true)).unwrap();
    assert_all_prefixes_rejected(&bytes, |b| is_format(decode_artifact(b)));
    let km = encode_artifact(&artifact(configs()[2], false)).unwrap();
    assert_all_prefixes_rejected(&km, |b| is_format(decode_artifact(b)));
}

#[test]
fn bad_magic_and_version_are_format_errors() {
    let a = encode_artifact(&artifact(QuantConfig::default(), true)).unwrap();
    let ck = encode_checkpoint(&Checkpoint {
        spec: spec(true),
        weights: weights(&spec(true), 2),
        grad_norm_inf: None,
    })
    .unwrap();
    let cl = encode_calib(&calib(3)).unwrap();
    for (bytes, dec) in [
        (
            a,
            Box::new(|b: &[u8]| is_format(decode_artifact(b))) as Box<dyn Fn(&[u8]) -> bool>,
        ),
        (ck, Box::new(|b: &[u8]| is_format(decode_checkpoint(b)))),
        (cl, Box::new(|b: &[u8]| is_format(decode_calib(b)))),
    ] {
        let mut magic = bytes.clone();
        magic[0] ^= 0x20;
        assert!(dec(&magic));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(dec(&version));
    }
}

#[test]
fn overlay_outside_the_layer_is_rejected() {
    let a = artifact(QuantConfig::default(), true);
    let mut bytes = encode_artifact(&a).unwrap();
    // Point the significant weight's row past the layer.
    let needle = 0.125f32.to_le_bytes();
    let at = bytes.windows(4).rposition(|w| w == needle).unwrap();
    bytes[at - 4..at - 2].copy_from_slice(&60000u16.to_le_bytes());
    assert!(is_format(decode_artifact(&bytes)));
}

#[test]
fn dimensions_beyond_sixteen_bits_cannot_be_stored() {
    let spec = ComputationSpec::new(70_000, vec![1], 2, Nonlinearity::Relu).unwrap();
    let w = zoo::init_weights(&spec, 0);
    let v = sensitivity::SensitivityVector::new(vec![1.0; w.len()], MetricKind::Gradient).unwrap();
    let model = quant::quantize_model(&w, &QuantConfig::default(), &v, &vec![false; w.len()]).unwrap();
    assert!(is_format(encode_artifact(&Artifact { spec, model })));
}

#[test]
fn checkpoints_keep_every_bit() {
    for bias in [true, false] {
        let s = spec(bias);
        let mut w = weights(&s, 4);
        w.values[0] = -0.0;
        w.values[1] = f64::from(f32::MIN_POSITIVE);
        for grad_norm_inf in [None, Some(1.5e-7)] {
            let ck = Checkpoint {
                spec: s.clone(),
                weights: w.clone(),
                grad_norm_inf,
            };
            let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
            assert_eq!(back, ck);
            assert!(back.weights.values[0].is_sign_negative());
        }
        let bytes = encode_checkpoint(&Checkpoint {
            spec: s.clone(),
            weights: w,
            grad_norm_inf: Some(2.0),
        })
        .unwrap();
        assert_all_prefixes_rejected(&bytes, |b| is_format(decode_checkpoint(b)));
    }
}

proptest! {
    #[test]
    fn calibration_sets_round_trip(seed in any::<u64>(), n in 1usize..20, d in 1usize..6, k in 1usize..5) {
        let gen = Generator { kind: zoo::GeneratorKind::RandomClusters, ..Generator::default() };
        let c = zoo::generate_calib(seed, n, d, k, gen).unwrap();
        let bytes = encode_calib(&c).unwrap();
        prop_assert_eq!(decode_calib(&bytes).unwrap(), c);
        for cut in [0, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(is_format(decode_calib(&bytes[..cut])));
        }
    }
}

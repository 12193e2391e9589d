use std::path::Path;

use evdelta::events::{decode_evb, encode_evb, read_events, write_events, EventFormat, SensorSize};
use evdelta_bench::{generate, SceneConfig};
use sha2::{Digest, Sha256};

fn digest(cfg: &SceneConfig) -> Vec<u8> {
    Sha256::digest(encode_evb(&generate(cfg).unwrap())).to_vec()
}

#[test]
fn same_seed_same_bytes() {
    let a = SceneConfig::default();
    assert_eq!(digest(&a), digest(&a));
    let b = SceneConfig { seed: 1, ..a.clone() };
    assert_ne!(digest(&a), digest(&b));
}

#[test]
fn mean_rate_matches_request() {
    for (rate, objects) in [(20_000.0, 1), (100_000.0, 3), (250_000.0, 5)] {
        let cfg = SceneConfig {
            rate_hz: rate,
            n_objects: objects,
            duration_us: 400_000,
            ..Default::default()
        };
        let n = generate(&cfg).unwrap().len() as f64;
        let expected = rate * 0.4;
        assert!((n - expected).abs() <= 0.2 * expected, "rate {rate}: {n} events");
    }
}

#[test]
fn empty_scene_is_valid_evb() {
    let cfg = SceneConfig {
        duration_us: 0,
        ..Default::default()
    };
    let bytes = encode_evb(&generate(&cfg).unwrap());
    let back = decode_evb(&bytes, Path::new("empty.evb")).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.sensor(), SensorSize::new(180, 240));
}

#[test]
fn file_roundtrip_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let stream = generate(&SceneConfig {
        duration_us: 20_000,
        ..Default::default()
    })
    .unwrap();
    for name in ["s.evb", "s.csv"] {
        let path = dir.path().join(name);
        let format = EventFormat::from_path(&path);
        write_events(&path, format, &stream).unwrap();
        let back = read_events(&path, format, Some(stream.sensor())).unwrap();
        assert_eq!(back.events(), stream.events(), "{name}");
    }
}

#[test]
fn bad_config_is_rejected() {
    for cfg in [
        SceneConfig {
            rate_hz: 0.0,
            ..Default::default()
        },
        SceneConfig {
            noise_fraction: 1.5,
            ..Default::default()
        },
    ] {
        assert!(generate(&cfg).is_err());
    }
}

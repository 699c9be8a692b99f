use std::collections::BTreeSet;
use std::path::PathBuf;

use flowguide::io::{
    decode_ffld, decode_slat, encode_ffld, encode_slat, read_ffld, read_slat, render_ply, write_slat,
    CorrespondenceFile, FeatureFile,
};
use flowguide::partition::{CorrespondenceMap, CorrespondenceMethod, FeatureField};
use flowguide::slat::StructuredLatent;
use flowguide::{Error, Matrix};
use proptest::prelude::*;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn golden_slat_file() {
    let bytes = std::fs::read(data("fixture.slat")).unwrap();
    assert_eq!(bytes.len(), 30);
    let expected = StructuredLatent::new(2, 1, vec![([1, 0, 0], vec![0.5])]).unwrap();
    assert_eq!(encode_slat(&expected), bytes);
    assert_eq!(read_slat(&data("fixture.slat")).unwrap(), expected);
}

#[test]
fn golden_ffld_file() {
    let shape = StructuredLatent::from_positions(4, 1, &[[3, 2, 0], [0, 0, 1]]).unwrap();
    let field = FeatureField::new("fixture", Matrix::from_rows(&[[1.0, -2.0], [0.25, 0.0]]).unwrap()).unwrap();
    let expected = FeatureFile::for_shape(&shape, field).unwrap();
    let bytes = std::fs::read(data("fixture.ffld")).unwrap();
    assert_eq!(encode_ffld(&expected), bytes);
    // the field takes its id from the file stem
    assert_eq!(read_ffld(&data("fixture.ffld")).unwrap(), expected);
}

#[test]
fn write_then_read_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.slat");
    let latent = StructuredLatent::new(8, 2, vec![([7, 0, 3], vec![1.5, -0.25]), ([0, 1, 0], vec![0.0, 2.0])]).unwrap();
    write_slat(&path, &latent).unwrap();
    assert_eq!(read_slat(&path).unwrap(), latent);
    assert!(matches!(
        read_slat(&dir.path().join("missing.slat")),
        Err(Error::ReadFailure { .. })
    ));
}

/// Finite values that survive the f32 storage exactly.
fn storable() -> impl Strategy<Value = f64> {
    (prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO).prop_map(f64::from)
}

fn positions(max_len: usize) -> impl Strategy<Value = (u32, BTreeSet<[u32; 3]>)> {
    prop_oneof![1u32..=4, 5u32..=300, Just(65535u32)].prop_flat_map(move |n| {
        let cells = (n as usize).pow(3).min(max_len);
        (
            Just(n),
            prop::collection::btree_set([0..n, 0..n, 0..n], 1..=cells),
        )
    })
}

fn latent(max_len: usize) -> impl Strategy<Value = StructuredLatent> {
    (positions(max_len), 1usize..=6).prop_flat_map(|((n, cells), c)| {
        let len = cells.len();
        prop::collection::vec(storable(), len * c).prop_map(move |values| {
            let entries = cells
                .iter()
                .zip(values.chunks(c))
                .map(|(p, v)| (*p, v.to_vec()))
                .collect();
            StructuredLatent::new(n, c, entries).unwrap()
        })
    })
}

fn feature_file() -> impl Strategy<Value = FeatureFile> {
    (latent(40), 1usize..=6).prop_flat_map(|(shape, d)| {
        prop::collection::vec(storable(), shape.len() * d).prop_map(move |values| {
            let field = FeatureField::new("f", Matrix::from_vec(shape.len(), d, values)).unwrap();
            FeatureFile::for_shape(&shape, field).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn slat_round_trip(latent in latent(40)) {
        let bytes = encode_slat(&latent);
        prop_assert_eq!(bytes.len(), 20 + latent.len() * (6 + 4 * latent.channels()));
        let back = decode_slat(&bytes).unwrap();
        prop_assert_eq!(&back, &latent);
        prop_assert_eq!(encode_slat(&back), bytes);
    }

    #[test]
    fn ffld_round_trip(file in feature_file()) {
        let bytes = encode_ffld(&file);
        let back = decode_ffld(&bytes, "f").unwrap();
        prop_assert_eq!(&back, &file);
        prop_assert_eq!(encode_ffld(&back), bytes);
    }

    #[test]
    fn truncation_is_always_detected(latent in latent(10), cut in 1usize..64) {
        let bytes = encode_slat(&latent);
        let keep = bytes.len().saturating_sub(cut);
        let is_truncated = matches!(decode_slat(&bytes[..keep]), Err(Error::TruncatedFile(_)));
        prop_assert!(is_truncated);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn correspondence_json_round_trip(target in prop::collection::vec(0usize..50, 1..40)) {
        let map = CorrespondenceMap { target, method: CorrespondenceMethod::GlobalNn };
        let file = CorrespondenceFile::new(&map, "q".repeat(64), "a".repeat(64), 50);
        let text = serde_json::to_string(&file).unwrap();
        let back: CorrespondenceFile = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back.to_map().unwrap(), map);
    }

    #[test]
    fn ply_follows_grammar(latent in latent(60)) {
        check_ply(&render_ply(&latent), &latent);
    }
}

/// Validates the ASCII PLY produced for `latent` line by line.
fn check_ply(text: &str, latent: &StructuredLatent) {
    assert!(text.ends_with('\n'));
    let mut lines = text.lines();
    let header = [
        "ply".to_string(),
        "format ascii 1.0".to_string(),
        "comment flowguide structured latent".to_string(),
        format!("element vertex {}", latent.len()),
        "property float x".to_string(),
        "property float y".to_string(),
        "property float z".to_string(),
        "property uchar red".to_string(),
        "property uchar green".to_string(),
        "property uchar blue".to_string(),
        "end_header".to_string(),
    ];
    for expected in &header {
        assert_eq!(lines.next(), Some(expected.as_str()));
    }
    let n = latent.resolution() as f64;
    let mut count = 0;
    for (line, p) in lines.by_ref().zip(latent.positions()) {
        let tokens: Vec<&str> = line.split(' ').collect();
        assert_eq!(tokens.len(), 6, "{line}");
        for axis in 0..3 {
            let v: f64 = tokens[axis].parse().unwrap();
            assert!(v > 0.0 && v < 1.0, "{line}");
            assert!((v - (p[axis] as f64 + 0.5) / n).abs() < 1e-6, "{line}");
        }
        for t in &tokens[3..] {
            t.parse::<u8>().unwrap();
        }
        count += 1;
    }
    assert_eq!(count, latent.len());
    assert_eq!(lines.next(), None);
}

#[test]
fn degenerate_latents_render_gray() {
    let latent = StructuredLatent::new(3, 2, vec![([0, 0, 0], vec![1.0, 1.0]), ([2, 2, 2], vec![1.0, 1.0])]).unwrap();
    let text = render_ply(&latent);
    check_ply(&text, &latent);
    assert!(text.ends_with("0.8333333 0.8333333 0.8333333 128 128 128\n"), "{text}");
}

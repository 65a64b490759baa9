//! Pack directory round trips, including packs produced byte-by-byte the
//! way a foreign writer (e.g. a Python script using `struct.pack`) would.

use std::fs;
use std::path::Path;

use oodbench::hash::fnv1a64;
use oodbench::pack::{read_manifest, read_pack, write_pack, ClassifierHead, FeaturePack};
use oodbench::{Matrix, OodError};
use proptest::prelude::*;

fn bits(m: &Matrix) -> Vec<u32> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

/// Minimal independent encoder: header fields packed by hand.
fn foreign_container(dtype: u8, rows: u64, cols: u64, payload: &[u8]) -> (Vec<u8>, String) {
    let mut out = Vec::new();
    out.extend_from_slice(b"OODM");
    out.push(1);
    out.push(dtype);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out.extend_from_slice(payload);
    let sum = fnv1a64(payload);
    out.extend_from_slice(&sum.to_le_bytes());
    (out, format!("{sum:016x}"))
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn write_foreign(dir: &Path, name: &str, dtype: u8, rows: u64, cols: u64, payload: &[u8]) -> serde_json::Value {
    let (bytes, sum) = foreign_container(dtype, rows, cols, payload);
    fs::write(dir.join(name), bytes).unwrap();
    serde_json::json!({ "file": name, "rows": rows, "cols": cols, "checksum": sum })
}

#[test]
fn foreign_writer_pack_reads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let feats = [0.5f32, -1.25, 3.0, 0.0, 7.5, -0.0];
    let weight = [1.0f32, 0.0, -1.0, 0.5, 0.25, 2.0];
    let bias = [0.1f32, -0.2];
    let logits: Vec<f32> = (0..2)
        .flat_map(|i| {
            (0..2).map(move |k| {
                let h = &feats[i * 3..i * 3 + 3];
                let w = &weight[k * 3..k * 3 + 3];
                bias[k] + h.iter().zip(w).map(|(a, b)| a * b).sum::<f32>()
            })
        })
        .collect();
    let labels: Vec<u8> = [1u32, 0].iter().flat_map(|l| l.to_le_bytes()).collect();
    let d = dir.path();
    let manifest = serde_json::json!({
        "format_version": 1,
        "d_feature": 3,
        "n_classes": 2,
        "splits": [{
            "name": "test",
            "rows": 2,
            "provenance": "foreign",
            "features": write_foreign(d, "split-000.features.oodm", 1, 2, 3, &f32_bytes(&feats)),
            "logits": write_foreign(d, "split-000.logits.oodm", 1, 2, 2, &f32_bytes(&logits)),
            "labels": write_foreign(d, "split-000.labels.oodm", 2, 2, 1, &labels),
        }],
        "head": {
            "weight": write_foreign(d, "head.weight.oodm", 1, 2, 3, &f32_bytes(&weight)),
            "bias": write_foreign(d, "head.bias.oodm", 1, 2, 1, &f32_bytes(&bias)),
        }
    });
    fs::write(d.join("manifest.json"), manifest.to_string()).unwrap();

    let set = read_pack(d).unwrap();
    let split = set.require_split("test").unwrap();
    assert_eq!(bits(split.features()), feats.map(f32::to_bits).to_vec());
    assert_eq!(split.logits().unwrap().data(), &logits[..]);
    assert_eq!(split.labels().unwrap(), &[1, 0]);
    assert_eq!(split.provenance(), "foreign");
    let head = set.require_head().unwrap();
    assert_eq!(head.weight().data(), &weight[..]);
    assert_eq!(head.bias(), &bias[..]);
    assert!(head.max_logit_deviation(split).unwrap().unwrap() < 1e-4);
}

#[test]
fn written_files_match_foreign_encoding() {
    // byte-level layout check: what we write is what a foreign reader expects
    let dir = tempfile::tempdir().unwrap();
    let m = Matrix::new(1, 2, vec![1.5, -2.0]).unwrap();
    let pack = FeaturePack::new("x", m, 2).unwrap();
    let manifest = write_pack(dir.path(), &[pack], None).unwrap();
    let file = dir.path().join(&manifest.splits[0].features.file);
    let (want, sum) = foreign_container(1, 1, 2, &f32_bytes(&[1.5, -2.0]));
    assert_eq!(fs::read(file).unwrap(), want);
    assert_eq!(manifest.splits[0].features.checksum, sum);
    assert_eq!(manifest.splits[0].features.file, "split-000.features.oodm");
}

#[test]
fn zero_matrix_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let pack = FeaturePack::new("z", Matrix::zeros(2, 3), 2).unwrap();
    write_pack(dir.path(), std::slice::from_ref(&pack), None).unwrap();
    assert_eq!(read_pack(dir.path()).unwrap().splits, vec![pack]);
}

#[test]
fn load_errors() {
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(read_pack(empty.path()), Err(OodError::ManifestMissing(_))));

    let dir = tempfile::tempdir().unwrap();
    let pack = FeaturePack::new("a", Matrix::new(3, 2, vec![1.0; 6]).unwrap(), 2).unwrap();
    write_pack(dir.path(), &[pack], None).unwrap();

    // manifest claims 4 rows, header says 3
    let path = dir.path().join("manifest.json");
    let text = fs::read_to_string(&path).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["splits"][0]["rows"] = 4.into();
    json["splits"][0]["features"]["rows"] = 4.into();
    fs::write(&path, json.to_string()).unwrap();
    assert!(matches!(read_pack(dir.path()), Err(OodError::HeaderMismatch { .. })));
    fs::write(&path, text).unwrap();
    read_manifest(dir.path()).unwrap();

    // one flipped payload byte
    let feat = dir.path().join("split-000.features.oodm");
    let mut bytes = fs::read(&feat).unwrap();
    bytes[24] ^= 0x01;
    fs::write(&feat, bytes).unwrap();
    assert!(matches!(read_pack(dir.path()), Err(OodError::Checksum { .. })));
}

#[test]
fn non_finite_and_bad_labels_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = serde_json::json!({
        "format_version": 1, "d_feature": 2, "n_classes": 2,
        "splits": [{
            "name": "s", "rows": 1,
            "features": write_foreign(d, "f.oodm", 1, 1, 2, &f32_bytes(&[1.0, f32::NAN])),
        }]
    });
    fs::write(d.join("manifest.json"), manifest.to_string()).unwrap();
    assert!(matches!(read_pack(d), Err(OodError::NonFinite { .. })));

    let labels: Vec<u8> = 5u32.to_le_bytes().to_vec();
    let manifest = serde_json::json!({
        "format_version": 1, "d_feature": 2, "n_classes": 2,
        "splits": [{
            "name": "s", "rows": 1,
            "features": write_foreign(d, "f.oodm", 1, 1, 2, &f32_bytes(&[1.0, 2.0])),
            "labels": write_foreign(d, "l.oodm", 2, 1, 1, &labels),
        }]
    });
    fs::write(d.join("manifest.json"), manifest.to_string()).unwrap();
    assert!(read_pack(d).is_err());
}

fn finite_f32() -> impl Strategy<Value = f32> {
    prop_oneof![
        any::<f32>().prop_filter("finite", |v| v.is_finite()),
        Just(-0.0f32),
        Just(f32::MIN_POSITIVE / 4.0),
        Just(f32::MAX),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_is_bit_exact(
        n in 1usize..6, d in 1usize..5, c in 2usize..4,
        seed_vals in prop::collection::vec(finite_f32(), 64),
        with_head in any::<bool>(),
    ) {
        let take = |k: usize, off: usize| -> Vec<f32> { (0..k).map(|i| seed_vals[(i + off) % 64]).collect() };
        let features = Matrix::new(n, d, take(n * d, 0)).unwrap();
        let logits = Matrix::new(n, c, take(n * c, 7)).unwrap();
        let labels: Vec<u32> = (0..n).map(|i| (i % c) as u32).collect();
        let a = FeaturePack::new("train", features.clone(), c).unwrap()
            .with_logits(logits).unwrap()
            .with_labels(labels).unwrap()
            .with_provenance("prop");
        let b = FeaturePack::new("ood", features, c).unwrap();
        let head = with_head.then(|| {
            ClassifierHead::new(Matrix::new(c, d, take(c * d, 3)).unwrap(), take(c, 11)).unwrap()
        });
        let dir = tempfile::tempdir().unwrap();
        write_pack(dir.path(), &[a.clone(), b.clone()], head.as_ref()).unwrap();
        let set = read_pack(dir.path()).unwrap();
        prop_assert_eq!(set.splits.len(), 2);
        for (orig, got) in [a, b].iter().zip(&set.splits) {
            prop_assert_eq!(bits(orig.features()), bits(got.features()));
            prop_assert_eq!(orig.logits().map(bits), got.logits().map(bits));
            prop_assert_eq!(orig.labels(), got.labels());
            prop_assert_eq!(orig.split_name(), got.split_name());
            prop_assert_eq!(orig.provenance(), got.provenance());
        }
        match (&head, &set.head) {
            (Some(h), Some(g)) => {
                prop_assert_eq!(bits(h.weight()), bits(g.weight()));
                let hb: Vec<u32> = h.bias().iter().map(|v| v.to_bits()).collect();
                let gb: Vec<u32> = g.bias().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(hb, gb);
            }
            (None, None) => {}
            _ => prop_assert!(false, "head presence changed"),
        }
    }
}

use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use oodbench::pack::{read_pack, ClassifierHead, FeaturePack};
use oodbench::scorers::{self, Method, ScorerConfig};
use oodbench::Matrix;
use oodbench_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn path_c(p: &Path) -> CString {
    cstr(p.to_str().unwrap())
}

fn last_error() -> Option<String> {
    let p = ood_last_error_message();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

const D: usize = 4;
const C: usize = 3;

fn features(n: usize, offset: f32) -> Vec<f32> {
    (0..n * D).map(|i| ((i * 7 % 11) as f32) * 0.3 - 1.0 + offset).collect()
}

fn weight() -> Vec<f32> {
    (0..C * D).map(|i| ((i * 5 % 7) as f32) * 0.25 - 0.7).collect()
}

const BIAS: [f32; C] = [0.5, 0.8, 0.6];

/// Pack with "train" (labeled), "val" and "ood" splits plus a head.
unsafe fn build_pack() -> *mut OodPackSet {
    let mut pack = ptr::null_mut();
    assert_eq!(ood_pack_new(C, &mut pack), OodStatus::Ok);
    assert_eq!(ood_pack_set_head(pack, weight().as_ptr(), C, D, BIAS.as_ptr()), OodStatus::Ok);
    let labels: Vec<u32> = (0..40).map(|i| (i % C) as u32).collect();
    let train = features(40, 0.0);
    let name = cstr("train");
    assert_eq!(
        ood_pack_add_split(pack, name.as_ptr(), train.as_ptr(), 40, D, ptr::null(), labels.as_ptr()),
        OodStatus::Ok
    );
    for (split, n, off) in [("val", 12, 0.1), ("ood", 15, 3.0)] {
        let f = features(n, off);
        let name = cstr(split);
        assert_eq!(
            ood_pack_add_split(pack, name.as_ptr(), f.as_ptr(), n, D, ptr::null(), ptr::null()),
            OodStatus::Ok
        );
    }
    pack
}

fn reference_pack(name: &str, n: usize, off: f32) -> FeaturePack {
    FeaturePack::new(name, Matrix::new(n, D, features(n, off)).unwrap(), C).unwrap()
}

unsafe fn score_split(det: *const OodDetector, pack: *const OodPackSet, split: &str) -> Vec<f64> {
    let name = cstr(split);
    // size query: capacity 0 reports the row count
    let mut n = 0;
    assert_eq!(
        ood_detector_score(det, pack, name.as_ptr(), ptr::null_mut(), 0, &mut n),
        OodStatus::BufferTooSmall
    );
    let mut out = vec![0.0; n];
    let mut written = 0;
    assert_eq!(
        ood_detector_score(det, pack, name.as_ptr(), out.as_mut_ptr(), n, &mut written),
        OodStatus::Ok,
        "{:?}",
        last_error()
    );
    assert_eq!(written, n);
    out
}

#[test]
fn build_write_open_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let pack = build_pack();
        let out_dir = dir.path().join("pack");
        assert_eq!(ood_pack_write(pack, path_c(&out_dir).as_ptr()), OodStatus::Ok);
        ood_pack_free(pack);

        // the files are a regular pack directory
        let set = read_pack(&out_dir).unwrap();
        assert_eq!(set.splits.len(), 3);
        assert_eq!(set.require_split("train").unwrap().labels().unwrap()[..3], [0, 1, 2]);

        let mut opened = ptr::null_mut();
        assert_eq!(ood_pack_open(path_c(&out_dir).as_ptr(), &mut opened), OodStatus::Ok);
        let (mut count, mut rows, mut cols, mut has_head) = (0, 0, 0, 0);
        assert_eq!(ood_pack_split_count(opened, &mut count), OodStatus::Ok);
        assert_eq!(ood_pack_split_shape(opened, cstr("ood").as_ptr(), &mut rows, &mut cols), OodStatus::Ok);
        assert_eq!(ood_pack_has_head(opened, &mut has_head), OodStatus::Ok);
        assert_eq!((count, rows, cols, has_head), (3, 15, D, 1));
        ood_pack_free(opened);
    }
}

#[test]
fn scores_match_the_library() {
    let head = ClassifierHead::new(Matrix::new(C, D, weight()).unwrap(), BIAS.to_vec()).unwrap();
    let train = reference_pack("train", 40, 0.0);
    let val = reference_pack("val", 12, 0.1);
    let ood = reference_pack("ood", 15, 3.0);
    unsafe {
        let pack = build_pack();
        for (method, json) in [
            ("msp", None),
            ("Energy", None),
            ("GradNorm", None),
            ("KLM", None),
            ("ReAct", Some(r#"{"react_percentile": 80}"#)),
            ("DICE", Some(r#"{"dice_sparsity": 0.5}"#)),
            ("KNN", Some(r#"{"knn_k": 5}"#)),
            ("ViM", Some(r#"{"vim_dim": 2}"#)),
        ] {
            let json_c = json.map(cstr);
            let mut det = ptr::null_mut();
            let status = ood_detector_fit(
                pack,
                cstr(method).as_ptr(),
                json_c.as_ref().map_or(ptr::null(), |c| c.as_ptr()),
                cstr("train").as_ptr(),
                cstr("val").as_ptr(),
                &mut det,
            );
            assert_eq!(status, OodStatus::Ok, "{method}: {:?}", last_error());
            assert!(last_error().is_none());

            let parsed: Method = method.parse().unwrap();
            let mut cfg: ScorerConfig = json.map_or_else(ScorerConfig::default, |j| serde_json::from_str(j).unwrap());
            cfg.method = parsed;
            let reference = scorers::fit(&cfg, &train, &head, Some(&val)).unwrap();
            let want = scorers::score(&reference, &ood, &head).unwrap().scores;
            let got = score_split(det, pack, "ood");
            assert_eq!(
                got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                want.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "{method}"
            );
            assert_eq!(CStr::from_ptr(ood_detector_method(det)).to_str().unwrap(), parsed.name());

            // persisted detectors score identically
            let dir = tempfile::tempdir().unwrap();
            assert_eq!(ood_detector_save(det, path_c(dir.path()).as_ptr()), OodStatus::Ok);
            let mut loaded = ptr::null_mut();
            assert_eq!(ood_detector_load(path_c(dir.path()).as_ptr(), &mut loaded), OodStatus::Ok);
            assert_eq!(score_split(loaded, pack, "ood"), got, "{method} after reload");
            ood_detector_free(loaded);
            ood_detector_free(det);
        }
        ood_pack_free(pack);
    }
}

#[test]
fn error_codes_and_messages() {
    unsafe {
        let mut pack = ptr::null_mut();
        assert_eq!(ood_pack_open(ptr::null(), &mut pack), OodStatus::NullArgument);
        assert!(last_error().unwrap().contains("dir"));
        assert!(pack.is_null());

        let missing = tempfile::tempdir().unwrap();
        assert_eq!(ood_pack_open(path_c(missing.path()).as_ptr(), &mut pack), OodStatus::Io);
        assert!(last_error().unwrap().contains("manifest"));

        let bad_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(ood_pack_open(bad_utf8.as_ptr().cast(), &mut pack), OodStatus::InvalidUtf8);

        assert_eq!(ood_pack_new(1, &mut pack), OodStatus::InvalidData);

        let pack = build_pack();
        let mut det = ptr::null_mut();
        let fit = |method: &str, json: Option<&str>, train: &str, det: &mut *mut OodDetector| {
            let j = json.map(cstr);
            ood_detector_fit(
                pack,
                cstr(method).as_ptr(),
                j.as_ref().map_or(ptr::null(), |c| c.as_ptr()),
                cstr(train).as_ptr(),
                ptr::null(),
                det,
            )
        };
        assert_eq!(fit("Mahalanobis", None, "train", &mut det), OodStatus::InvalidConfig);
        assert!(last_error().unwrap().contains("Mahalanobis"));
        assert_eq!(fit("KNN", Some("{not json"), "train", &mut det), OodStatus::InvalidConfig);
        assert_eq!(fit("KNN", Some(r#"{"knn_k": 0}"#), "train", &mut det), OodStatus::InvalidConfig);
        assert_eq!(fit("MSP", None, "test", &mut det), OodStatus::InvalidData);
        assert!(last_error().unwrap().contains("train, val, ood"));
        assert!(det.is_null());

        // a split with the wrong feature width
        let wide = [0.5f32; 2 * (D + 1)];
        let status = ood_pack_add_split(pack, cstr("wide").as_ptr(), wide.as_ptr(), 2, D + 1, ptr::null(), ptr::null());
        assert_eq!(status, OodStatus::DimensionMismatch);
        // labels outside the class range
        let f = features(2, 0.0);
        let labels = [0u32, C as u32];
        let status = ood_pack_add_split(pack, cstr("x").as_ptr(), f.as_ptr(), 2, D, ptr::null(), labels.as_ptr());
        assert_eq!(status, OodStatus::InvalidData);

        assert_eq!(fit("MSP", None, "train", &mut det), OodStatus::Ok);
        let mut small = [0.0f64; 3];
        let mut written = 0;
        let status = ood_detector_score(det, pack, cstr("ood").as_ptr(), small.as_mut_ptr(), 3, &mut written);
        assert_eq!(status, OodStatus::BufferTooSmall);
        assert_eq!(written, 15);
        let status = ood_detector_score(det, pack, cstr("nope").as_ptr(), small.as_mut_ptr(), 3, &mut written);
        assert_eq!(status, OodStatus::InvalidData);

        // KNN on an all-zero feature row is a degenerate input
        let mut knn = ptr::null_mut();
        assert_eq!(fit("KNN", Some(r#"{"knn_k": 3}"#), "train", &mut knn), OodStatus::Ok);
        let zeros = [0.0f32; D];
        let status = ood_pack_add_split(pack, cstr("zero").as_ptr(), zeros.as_ptr(), 1, D, ptr::null(), ptr::null());
        assert_eq!(status, OodStatus::Ok);
        let mut one = [0.0f64; 1];
        let status = ood_detector_score(knn, pack, cstr("zero").as_ptr(), one.as_mut_ptr(), 1, &mut written);
        assert_eq!(status, OodStatus::Degenerate, "{:?}", last_error());

        assert_eq!(ood_detector_load(path_c(missing.path()).as_ptr(), &mut det), OodStatus::Io);

        ood_detector_free(knn);
        ood_detector_free(det);
        ood_pack_free(pack);
        ood_pack_free(ptr::null_mut());
        ood_detector_free(ptr::null_mut());
        assert!(ood_detector_method(ptr::null()).is_null());
    }
}

#[test]
fn corrupted_pack_reports_format_error() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let pack = build_pack();
        assert_eq!(ood_pack_write(pack, path_c(dir.path()).as_ptr()), OodStatus::Ok);
        ood_pack_free(pack);
    }
    let file = dir.path().join("split-000.features.oodm");
    let mut bytes = std::fs::read(&file).unwrap();
    bytes[30] ^= 0x40;
    std::fs::write(&file, bytes).unwrap();
    let mut pack = ptr::null_mut();
    assert_eq!(unsafe { ood_pack_open(path_c(dir.path()).as_ptr(), &mut pack) }, OodStatus::Format);
    assert!(last_error().unwrap().contains("checksum"));
}

#[test]
fn metrics_through_the_abi() {
    let id = [0.9, 0.4];
    let ood = [0.5, 0.1];
    let mut out = OodOutcome::default();
    let status = unsafe { ood_evaluate(id.as_ptr(), 2, ood.as_ptr(), 2, &mut out) };
    assert_eq!(status, OodStatus::Ok);
    assert!((out.auroc - 0.75).abs() < 1e-12);
    assert!((out.aupr_in - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    assert_eq!(out.fpr_at_95, 0.5);

    let id = [0.9, 0.8, 0.7, 0.6, 0.5];
    let ood = [0.55, 0.4, 0.3];
    let mut fpr = 0.0;
    let status = unsafe { ood_fpr_at_tpr(id.as_ptr(), 5, ood.as_ptr(), 3, 0.95, &mut fpr) };
    assert_eq!(status, OodStatus::Ok);
    assert!((fpr - 1.0 / 3.0).abs() < 1e-12);

    let status = unsafe { ood_evaluate(ptr::null(), 0, ood.as_ptr(), 3, &mut out) };
    assert_eq!(status, OodStatus::InvalidData);
    let status = unsafe { ood_evaluate(ptr::null(), 2, ood.as_ptr(), 3, &mut out) };
    assert_eq!(status, OodStatus::NullArgument);
    let status = unsafe { ood_fpr_at_tpr(id.as_ptr(), 5, ood.as_ptr(), 3, 1.5, &mut fpr) };
    assert_ne!(status, OodStatus::Ok);
}

#[test]
fn errors_are_per_thread() {
    let mut pack = ptr::null_mut();
    assert_eq!(unsafe { ood_pack_open(ptr::null(), &mut pack) }, OodStatus::NullArgument);
    std::thread::spawn(|| assert!(last_error().is_none())).join().unwrap();
    assert!(last_error().is_some());
    assert!(!unsafe { CStr::from_ptr(ood_version()) }.to_str().unwrap().is_empty());
}

#[test]
fn header_compiles_as_c() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/oodbench.h");
    let src = r#"
#include "oodbench.h"
int main(void) {
    OodPackSet *pack = NULL;
    OodOutcome o;
    double id[2] = {0.9, 0.4}, ood[2] = {0.5, 0.1};
    OodStatus s = ood_evaluate(id, 2, ood, 2, &o);
    if (s != OOD_STATUS_OK) return 1;
    s = ood_pack_new(3, &pack);
    ood_pack_free(pack);
    return s == OOD_STATUS_OK ? 0 : 1;
}
"#;
    let dir = tempfile::tempdir().unwrap();
    let c_file = dir.path().join("smoke.c");
    std::fs::write(&c_file, src).unwrap();
    let result = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&c_file)
        .output();
    match result {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("skipping C compile check, no compiler: {e}"),
    }
}

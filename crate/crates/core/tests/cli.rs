//! End-to-end runs of the `oodbench` binary.

mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use oodbench::bench::{AGGREGATE_FILE, MANIFEST_FILE, REPORT_FILE, ROWS_FILE};

const TRAINING: &str = "max_epochs = 4\npatience = 2\nfeature_dim = 64\nbatch_size = 16\n";

fn oodbench(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_oodbench"))
        .args(args)
        .env("OODBENCH_THREADS", "2")
        .output()
        .expect("binary runs");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bench_is_deterministic_and_report_recomputes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::leave_one_in_fixture(dir.path(), [60, 20, 30], TRAINING);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = oodbench(&["bench", "--config", s(&cfg), "--methods", "msp,energy,knn", "--out", s(out)]);
        assert!(o.status.success());
    }
    for f in [ROWS_FILE, AGGREGATE_FILE, REPORT_FILE, MANIFEST_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let rows = fs::read_to_string(a.join(ROWS_FILE)).unwrap();
    // 3 methods x 6 (ID, OOD) pairs x 2 seeds
    assert_eq!(rows.lines().count(), 1 + 36);

    let again = dir.path().join("again");
    let o = oodbench(&["report", "--rows", s(&a.join(ROWS_FILE)), "--out", s(&again), "--title", "fixture"]);
    assert!(o.status.success());
    assert_eq!(
        fs::read(a.join(AGGREGATE_FILE)).unwrap(),
        fs::read(again.join(AGGREGATE_FILE)).unwrap()
    );
    assert_eq!(fs::read(a.join(REPORT_FILE)).unwrap(), fs::read(again.join(REPORT_FILE)).unwrap());
}

#[test]
fn failed_cells_give_nonzero_exit_and_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::leave_one_in_fixture(dir.path(), [30, 10, 10], TRAINING);
    let out = dir.path().join("out");
    let missing = dir.path().join("no-packs");
    let o = oodbench(&[
        "bench", "--config", s(&cfg), "--methods", "msp", "--seeds", "1", "--out", s(&out), "--packs", s(&missing),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("failed: method=MSP id=comp"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["failures"].as_array().unwrap().len(), 6);
    assert!(fs::read_to_string(out.join(REPORT_FILE)).unwrap().contains("Failed cells"));

    let o = oodbench(&["bench", "--config", s(&dir.path().join("nope.toml")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_fit_score_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = common::leave_one_in_fixture(d, [60, 20, 30], TRAINING);
    let pack = d.join("pack");
    let o = oodbench(&["train-desk", "--config", s(&cfg), "--id", "comp", "--seed", "7", "--out", s(&pack)]);
    assert!(o.status.success());
    assert!(pack.join("history.csv").is_file());
    let o = oodbench(&["pack", "validate", s(&pack)]);
    assert!(o.status.success());
    let listing = String::from_utf8_lossy(&o.stdout);
    assert!(listing.contains("pol") && listing.contains("sport"), "{listing}");

    let det = d.join("det");
    assert!(oodbench(&["fit", "--packs", s(&pack), "--method", "vim", "--out", s(&det)]).status.success());
    for split in ["test", "pol"] {
        let out = d.join(format!("{split}.csv"));
        assert!(oodbench(&["score", "--packs", s(&pack), "--detector", s(&det), "--split", split, "--out", s(&out)])
            .status
            .success());
    }
    let o = oodbench(&["eval", "--id-scores", s(&d.join("test.csv")), "--ood-scores", s(&d.join("pol.csv"))]);
    assert!(o.status.success());
    let metrics: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(metrics["auroc"].as_f64().unwrap() > 0.5);

    // the exported pack serves as an external pack source
    let ext = d.join("ext");
    fs::create_dir_all(ext.join("comp")).unwrap();
    fs::rename(&pack, ext.join("comp").join("7")).unwrap();
    let scen = d.join("one.toml");
    fs::write(
        &scen,
        "name = \"one\"\n[[plan]]\nid = \"comp\"\nood = [{ group = \"Semantic\", set = \"pol\" }]\n",
    )
    .unwrap();
    let out = d.join("ext-out");
    let o = oodbench(&["bench", "--config", s(&scen), "--seeds", "7", "--packs", s(&ext), "--out", s(&out)]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(out.join(ROWS_FILE)).unwrap().lines().count(), 1 + 8);
}

#[test]
fn corrupt_and_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = common::topic_corpus("x", 2, [10, 0, 5], 1);
    common::write_csv(&d.join("in.csv"), &corpus);
    let out = d.join("out.csv");
    let o = oodbench(&["corrupt", "--input", s(&d.join("in.csv")), "--output", s(&out), "--split-column", "split"]);
    assert!(o.status.success());
    let before = fs::read_to_string(d.join("in.csv")).unwrap();
    let after = fs::read_to_string(&out).unwrap();
    assert_eq!(before.lines().count(), after.lines().count());
    assert_ne!(before, after);

    fs::write(d.join("f.csv"), "1,2,3\n4,5,6\n").unwrap();
    fs::write(d.join("w.csv"), "1,0,0\n0,1,0\n").unwrap();
    fs::write(d.join("b.csv"), "0\n0.5\n").unwrap();
    fs::write(d.join("y.csv"), "1\n0\n").unwrap();
    let split = format!("train={},-,{}", s(&d.join("f.csv")), s(&d.join("y.csv")));
    let pack = d.join("ingested");
    let o = oodbench(&[
        "pack", "ingest", "--out", s(&pack), "--split", &split,
        "--head-weight", s(&d.join("w.csv")), "--head-bias", s(&d.join("b.csv")),
    ]);
    assert!(o.status.success());
    let set = oodbench::read_pack(&pack).unwrap();
    assert_eq!(set.require_split("train").unwrap().labels().unwrap(), &[1, 0]);

    // W h + b = [1, 2.5], [4, 5.5]
    for (logits, ok) in [("1,2.5\n4,5.5\n", true), ("1,2.5\n4,5.6\n", false)] {
        fs::write(d.join("z.csv"), logits).unwrap();
        let split = format!("test={},{}", s(&d.join("f.csv")), s(&d.join("z.csv")));
        let pack = d.join(if ok { "consistent" } else { "inconsistent" });
        let o = oodbench(&[
            "pack", "ingest", "--out", s(&pack), "--split", &split,
            "--head-weight", s(&d.join("w.csv")), "--head-bias", s(&d.join("b.csv")),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let o = oodbench(&["pack", "validate", s(&pack)]);
        assert_eq!(o.status.code(), Some(if ok { 0 } else { 2 }), "{}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn shipped_scenarios_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let s1 = oodbench::scenarios::ScenarioConfig::load(&root.join("scenario1.toml")).unwrap();
    let plans = s1.plans().unwrap();
    assert_eq!(plans.len(), 1);
    assert_eq!(plans[0].ood.len(), 8);
    assert_eq!(s1.seeds, vec![2021, 2022, 2023, 2024, 2025]);
    let sizes = s1.derive.iter().find(|d| d.name == "NC/I").unwrap().expected_sizes;
    assert_eq!(sizes, Some([66223, 26475, 39688]));
    let s2 = oodbench::scenarios::ScenarioConfig::load(&root.join("scenario2.toml")).unwrap();
    let plans = s2.plans().unwrap();
    assert_eq!(plans.len(), 6);
    assert_eq!(plans.iter().map(|p| p.ood.len()).sum::<usize>(), 12);
}

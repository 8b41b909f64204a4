//! End-to-end runs of the `edgebias` binary.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY_DATASET: [&str; 6] = [
    "--set",
    "height=32",
    "--set",
    "width=40",
    "--set",
    "glyph_source.per_class=3",
];

fn edgebias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgebias"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_into(dir: &Path, count: usize) -> Output {
    let count = count.to_string();
    let mut args = vec!["gen", "--count", &count, "--out", p(dir)];
    args.extend(TINY_DATASET);
    edgebias(&args)
}

fn names_with_prefix(dir: &Path, prefix: &str) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(prefix))
        .collect();
    names.sort();
    names
}

#[test]
fn help_lists_exit_codes() {
    let out = edgebias(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("Exit codes:"));
    for sub in ["audit", "gen", "train", "eval", "saliency", "augment", "gradcheck", "report"] {
        assert!(text.contains(sub), "help misses {sub}");
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&edgebias(&[])), 2);
    assert_eq!(code(&edgebias(&["frobnicate"])), 2);
    assert_eq!(code(&edgebias(&["gen", "--no-such-flag", "--out", "x"])), 2);
    assert_eq!(code(&edgebias(&["gen", "--count", "three", "--out", "x"])), 2);
}

#[test]
fn gen_writes_exactly_count_pairs_deterministically() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert_eq!(code(&gen_into(a.path(), 3)), 0);
    assert_eq!(code(&gen_into(b.path(), 3)), 0);
    let samples = names_with_prefix(a.path(), "sample_");
    assert_eq!(samples, ["sample_00000.pgm", "sample_00001.pgm", "sample_00002.pgm"]);
    assert_eq!(names_with_prefix(a.path(), "label_").len(), 3);
    let meta = std::fs::read_to_string(a.path().join("samples.jsonl")).unwrap();
    assert_eq!(meta.lines().count(), 3);
    for name in samples.iter().chain(["samples.jsonl".to_string()].iter()) {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name} differs between runs"
        );
    }
}

#[test]
fn missing_config_exits_3_and_bad_config_exits_4() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.json");
    let out = edgebias(&["gen", "--config", p(&missing), "--out", p(dir.path())]);
    assert_eq!(code(&out), 3);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"height": 32, "colour": "blue"}"#).unwrap();
    let out = edgebias(&["gen", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(code(&out), 4);

    let out = edgebias(&["gen", "--set", "count=0", "--out", p(dir.path())]);
    assert_eq!(code(&out), 4);
}

#[test]
fn overrides_reach_the_dataset() {
    let dir = TempDir::new().unwrap();
    let out = edgebias(&[
        "gen",
        "--count",
        "1",
        "--set",
        "height=30",
        "--set",
        "width=50",
        "--set",
        "glyph_source.per_class=2",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 0);
    let img = edgebias::pnm::read_pnm(&dir.path().join("sample_00000.pgm")).unwrap();
    assert_eq!((img.height, img.width), (30, 50));
}

#[test]
fn augment_ops_pass_their_checks() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&gen_into(dir.path(), 1)), 0);
    let (img, label) = (dir.path().join("sample_00000.pgm"), dir.path().join("label_00000.pgm"));
    let cases: [&[&str]; 4] = [
        &["--op", "shift", "--dx", "-7", "--dy", "3"],
        &["--op", "random-shift", "--seed", "5"],
        &["--op", "boundary", "--seed", "2"],
        &["--op", "edge-drop", "--band", "4", "--seed", "1"],
    ];
    for extra in cases {
        let out_dir = dir.path().join(extra[1]);
        let mut args = vec!["augment", "--input", p(&img), "--label", p(&label), "--out", p(&out_dir)];
        args.extend_from_slice(extra);
        let out = edgebias(&args);
        assert_eq!(code(&out), 0, "{extra:?}: {}", String::from_utf8_lossy(&out.stderr));
        let text = stdout(&out);
        assert!(text.contains("PASS"), "{extra:?}: {text}");
        assert!(!text.contains("FAIL"), "{extra:?}: {text}");
        assert!(out_dir.join("augmented.pgm").exists());
    }
}

#[test]
fn boundary_without_label_is_invalid_input() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&gen_into(dir.path(), 1)), 0);
    let img = dir.path().join("sample_00000.pgm");
    let out = edgebias(&["augment", "--input", p(&img), "--op", "boundary", "--out", p(dir.path())]);
    assert_eq!(code(&out), 4);
}

#[test]
fn gradcheck_passes() {
    let out = edgebias(&["gradcheck", "--trials", "2"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(!stdout(&out).contains("FAIL"));
}

#[test]
fn audit_fixture_and_unknown_category() {
    let dir = TempDir::new().unwrap();
    let ann = dir.path().join("instances.json");
    std::fs::write(
        &ann,
        r#"{
          "images": [{"id": 1, "width": 100, "height": 100}],
          "annotations": [
            {"id": 1, "image_id": 1, "category_id": 3, "bbox": [40, 40, 20, 20]},
            {"id": 2, "image_id": 1, "category_id": 3, "bbox": [0, 0, 10, 10]},
            {"id": 3, "image_id": 1, "category_id": 3, "bbox": [45, 10, 10, 30]}
          ],
          "categories": [{"id": 3, "name": "car"}]
        }"#,
    )
    .unwrap();
    let out_dir = dir.path().join("audit");
    let out = edgebias(&["audit", "--annotations", p(&ann), "--grid", "4", "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("car,3,"));
    assert!(out_dir.join("heatmap_car.pgm").exists());

    let out = edgebias(&["audit", "--annotations", p(&ann), "--category", "zebra", "--out", p(&out_dir)]);
    assert_eq!(code(&out), 4);
}

#[test]
fn train_eval_saliency_report_pipeline() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    let train_sets = [
        "epochs=1",
        "train_count=8",
        "batch_size=4",
        "eval_count=4",
        "repeats=1",
        "model.depth=2",
        "model.base_channels=2",
        "dataset.height=32",
        "dataset.width=40",
        "dataset.glyph_source.per_class=3",
        r#"eval_bands=[{"kind":"band","lo":0.0,"hi":0.1},{"kind":"band","lo":0.8,"hi":1.0},{"kind":"unrestricted"}]"#,
    ];
    let mut args = vec!["train", "--out", p(&run)];
    for s in &train_sets {
        args.extend(["--set", s]);
    }
    let out = edgebias(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["results.json", "matrix_raw.csv", "matrix_norm.csv", "curves.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let ckpt = run.join("checkpoints").join("repeat0.ckpt");
    assert!(ckpt.exists());

    let eval_dir = dir.path().join("eval");
    let mut args = vec!["eval", "--checkpoint", p(&ckpt), "--out", p(&eval_dir)];
    for s in &train_sets {
        args.extend(["--set", s]);
    }
    let out = edgebias(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(eval_dir.join("eval_raw.csv").exists());

    let sal_dir = dir.path().join("saliency");
    let mut args = vec![
        "saliency",
        "--checkpoint",
        p(&ckpt),
        "--extent-x",
        "4",
        "--extent-y",
        "2",
        "--stride",
        "2",
        "--out",
        p(&sal_dir),
    ];
    args.extend(TINY_DATASET);
    let out = edgebias(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(sal_dir.join("saliency_shift.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);

    let rep_dir = dir.path().join("report");
    let out = edgebias(&["report", "--results", p(&run), "--results", p(&run), "--asymmetry", "--out", p(&rep_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let raw = std::fs::read_to_string(rep_dir.join("report_raw.csv")).unwrap();
    assert_eq!(raw.lines().count(), 3);
}

#[test]
fn eval_of_missing_checkpoint_exits_3() {
    let dir = TempDir::new().unwrap();
    let out = edgebias(&[
        "eval",
        "--checkpoint",
        p(&dir.path().join("nope.ckpt")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&out), 3);
}

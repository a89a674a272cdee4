use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tubelink"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/bridge")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tubelink")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn bridge_pipeline(out: &Path, extra: &[&str]) -> Output {
    let (d, t, g) = (
        fixture("detections.jsonl"),
        fixture("tubelets.jsonl"),
        fixture("gt.jsonl"),
    );
    let mut args = vec![
        "pipeline",
        "--detections",
        s(&d),
        "--tubelets",
        s(&t),
        "--gt",
        s(&g),
        "--tubelet-len",
        "4",
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn golden_bridge_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = bridge_pipeline(dir.path(), &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for name in ["detections", "tubes", "tubelets"] {
        assert_eq!(
            read(&dir.path().join(format!("{name}.jsonl"))),
            read(&fixture(&format!("expected_{name}.jsonl"))),
            "{name}.jsonl differs from the golden file"
        );
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&read(&dir.path().join("metrics.json"))).unwrap();
    // 7 of 8 ground-truth boxes found, all at precision 1
    assert_eq!(metrics["map"], 0.875);
}

#[test]
fn bridge_without_merge_leaves_two_fragments() {
    let dir = tempfile::tempdir().unwrap();
    let out = bridge_pipeline(dir.path(), &["--no-merge", "--no-rescore"]);
    assert!(out.status.success());
    let tubes = read(&dir.path().join("tubes.jsonl"));
    assert_eq!(tubes.lines().count(), 2);
    // detections keep their NMS/voting scores
    let dets = read(&dir.path().join("detections.jsonl"));
    assert!(dets.lines().next().unwrap().contains("\"score\":0.875"));
    assert!(dets.lines().last().unwrap().contains("\"score\":0.25"));
}

#[test]
fn pipeline_output_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&[
        "synth",
        "--seed",
        "17",
        "--out",
        s(&data),
        "--p-miss",
        "0.1",
        "--p-confuse",
        "0.05",
        "--fp-rate",
        "0.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let go = |out: &Path, threads: &str| {
        let o = run(&[
            "pipeline",
            "--detections",
            s(&data.join("detections.jsonl")),
            "--tubelets",
            s(&data.join("tubelets.jsonl")),
            "--gt",
            s(&data.join("gt.jsonl")),
            "--threads",
            threads,
            "--out",
            s(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    go(&a, "1");
    go(&b, "1");
    go(&c, "0");
    for f in [
        "detections.jsonl",
        "tubes.jsonl",
        "tubelets.jsonl",
        "metrics.json",
    ] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(
            x,
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs between runs"
        );
        assert_eq!(
            x,
            std::fs::read(c.join(f)).unwrap(),
            "{f} depends on thread count"
        );
    }
}

#[test]
fn synth_is_reproducible_and_needs_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&["synth", "--seed", "5", "--out", s(&a)])
        .status
        .success());
    assert!(run(&["synth", "--seed", "5", "--out", s(&b)])
        .status
        .success());
    for f in ["detections.jsonl", "tubelets.jsonl", "gt.jsonl"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap()
        );
    }
    let o = run(&["synth", "--out", s(&dir.path().join("c"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_score_is_an_ingest_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        concat!(
            r#"{"video":"v","frame":1,"class":0,"score":0.5,"bbox":[0,0,1,1]}"#,
            "\n",
            r#"{"video":"v","frame":2,"class":0,"bbox":[0,0,1,1]}"#,
            "\n"
        ),
    )
    .unwrap();
    let o = run(&[
        "link",
        "--detections",
        s(&bad),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.jsonl:2"), "{err}");
    assert!(err.contains("score"), "{err}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[pipeline]\nbeta = 2.0\n").unwrap();
    let det = fixture("detections.jsonl");
    let o = run(&[
        "link",
        "--detections",
        s(&det),
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));

    // tubelets of length 4 against the default N = 6
    let o = run(&[
        "pipeline",
        "--detections",
        s(&det),
        "--tubelets",
        s(&fixture("tubelets.jsonl")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_with_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[pipeline]\ntubelet_len = 4\nrescore = false\n").unwrap();
    let o = run(&[
        "pipeline",
        "--detections",
        s(&fixture("detections.jsonl")),
        "--tubelets",
        s(&fixture("tubelets.jsonl")),
        "--config",
        s(&cfg),
        "--beta",
        "0.5",
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // beta 0.5 keeps frames 1, 2, 3, 4, 6; without rescoring scores stay as ingested
    let dets = read(&dir.path().join("o/detections.jsonl"));
    let frames: Vec<&str> = dets
        .lines()
        .map(|l| &l[l.find("\"frame\"").unwrap()..][..9])
        .collect();
    assert_eq!(
        frames,
        [
            "\"frame\":1",
            "\"frame\":2",
            "\"frame\":3",
            "\"frame\":4",
            "\"frame\":6"
        ]
    );
    assert!(dets.contains("\"score\":0.5,\"bbox\":[10.0,10.0,50.0,50.0],\"proposal\":\"p4\""));
}

#[test]
fn tnms_passes_unknown_fields_through() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("t.jsonl");
    let mut text = read(&fixture("tubelets.jsonl"));
    text = text.replacen("\"box_ids\"", "\"origin\":{\"net\":\"rpn\"},\"box_ids\"", 1);
    std::fs::write(&input, &text).unwrap();
    let out = dir.path().join("kept.jsonl");
    let o = run(&[
        "tnms",
        "--tubelets",
        s(&input),
        "--out",
        s(&out),
        "--tubelet-len",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let kept = read(&out);
    assert_eq!(kept.lines().count(), 1);
    assert!(kept.contains("\"id\":\"bridge\""));
    assert!(kept.contains("\"origin\":{\"net\":\"rpn\"}"));
}

#[test]
fn eval_reports_ap() {
    let o = run(&[
        "eval",
        "--detections",
        s(&fixture("expected_detections.jsonl")),
        "--gt",
        s(&fixture("gt.jsonl")),
        "--coco",
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["iou_thresholds"].as_array().unwrap().len(), 10);
    // the voted box at frame 2 has IoU 1560/1640 > 0.95, so every threshold
    // sees 7 hits out of 8
    assert_eq!(v["map"], 0.875, "{v}");
}

#[test]
fn pool_demo_shape() {
    for n in ["1", "6", "10"] {
        let o = run(&["pool", "--frames", n]);
        assert!(o.status.success());
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(v["pooled_shape"], serde_json::json!([7, 7, 256]));
    }
}

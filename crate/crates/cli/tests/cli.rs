use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mitodet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mitodet")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mitodet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    mitodet(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path and contents of every file under `root`.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Writes annotation and detection CSVs that produce the given counts under
/// `center:30`: objects sit 100 px apart, true positives exactly on them and
/// false positives far away from all of them.
fn count_fixture(dir: &Path, tp: usize, fp: usize, fn_: usize) -> (PathBuf, PathBuf) {
    let per_image = 200;
    let place = |k: usize| (format!("img{:03}", k / per_image), 50.0 + 100.0 * (k % 20) as f64, 50.0 + 100.0 * ((k % per_image) / 20) as f64);
    let mut gt = String::from("image_id,cx,cy,label\n");
    let mut dets = String::from("image_id,x,y,w,h,score,stage\n");
    for k in 0..tp + fn_ {
        let (id, x, y) = place(k);
        writeln!(gt, "{id},{x},{y},mitosis").unwrap();
        if k < tp {
            writeln!(dets, "{id},{},{},50,50,0.9,final", x - 25.0, y - 25.0).unwrap();
        }
    }
    for k in 0..fp {
        let (id, x, y) = place(k);
        writeln!(dets, "{id},{},{},50,50,0.8,final", x - 25.0, y + 5000.0).unwrap();
        // Proposal rows must be ignored by evaluation.
        if k % 100 == 0 {
            writeln!(dets, "{id},{},{},50,50,0.1,proposal", x + 5000.0, y).unwrap();
        }
    }
    let (g, d) = (dir.join("gt.csv"), dir.join("dets.csv"));
    fs::write(&g, gt).unwrap();
    fs::write(&d, dets).unwrap();
    (g, d)
}

#[test]
fn evaluate_reports_two_stage_table_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (g, d) = count_fixture(dir.path(), 17030, 3272, 1288);
    let out = ok(&["evaluate", "--dets", s(&d), "--gt", s(&g), "--rule", "center:30"]);
    // 17030 / 18318 = 0.92970, which rounds to 0.930.
    assert!(out.starts_with("P=0.839 R=0.930 F1=0.882\n"), "{out}");
    assert!(out.contains("17030") && out.contains("3272") && out.contains("1288"), "{out}");
}

#[test]
fn evaluate_reports_single_stage_table_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (g, d) = count_fixture(dir.path(), 17441, 5433, 877);
    let out = ok(&["evaluate", "--dets", s(&d), "--gt", s(&g), "--rule", "center:30", "--out", s(&dir.path().join("ev"))]);
    assert!(out.starts_with("P=0.762 R=0.952 F1=0.847\n"), "{out}");
    let report = fs::read_to_string(dir.path().join("ev/report.csv")).unwrap();
    assert!(report.lines().last().unwrap().starts_with("ALL,17441,5433,877,"), "{report}");
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["synth", "--n", "5", "--seed", "7", "--out", s(&a)]);
    ok(&["synth", "--n", "5", "--seed", "7", "--out", s(&b)]);
    ok(&["synth", "--n", "5", "--seed", "8", "--out", s(&c)]);
    let ta = tree(&a);
    assert_eq!(ta.len(), 5 + 3, "5 images, annotations, manifest, run.json");
    assert_eq!(ta, tree(&b));
    assert_ne!(fs::read(a.join("annotations.csv")).unwrap(), fs::read(c.join("annotations.csv")).unwrap());
}

#[test]
fn oracle_models_give_perfect_scores_and_replay_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let p = |x: &str| dir.path().join(x);
    ok(&["synth", "--n", "2", "--seed", "3", "--set", "synth.size=700", "--out", s(&p("data"))]);
    let ann = p("data/annotations.csv");
    let oracle = format!("oracle:{}", s(&ann));
    let img = p("data/images/synth_000.png");
    ok(&["infer", "--image", s(&img), "--proposer", &oracle, "--classifier", "oracle", "--out", s(&p("inf")), "--overlay"]);
    assert!(p("inf/overlays/synth_000.png").exists());
    let out = ok(&["evaluate", "--dets", s(&p("inf/detections")), "--gt", s(&ann), "--out", s(&p("ev"))]);
    // The ground truth also lists the second image, which was not processed.
    assert!(out.contains("R=0.500"), "{out}");

    ok(&["infer", "--data", s(&p("data")), "--split", "all", "--proposer", &oracle, "--classifier", "oracle", "--out", s(&p("inf2"))]);
    let out = ok(&["evaluate", "--dets", s(&p("inf2/detections.csv")), "--gt", s(&ann), "--out", s(&p("ev2"))]);
    assert!(out.starts_with("P=1.000 R=1.000 F1=1.000\n"), "{out}");

    // Replaying the recorded configuration reproduces every output byte.
    ok(&["--config", s(&p("inf2/run.json")), "infer", "--data", s(&p("data")), "--split", "all", "--proposer", &oracle, "--classifier", "oracle", "--out", s(&p("inf3"))]);
    assert_eq!(tree(&p("inf2")), tree(&p("inf3")));
    ok(&["--config", s(&p("ev2/run.json")), "evaluate", "--dets", s(&p("inf2/detections.csv")), "--gt", s(&ann), "--out", s(&p("ev3"))]);
    assert_eq!(tree(&p("ev2")), tree(&p("ev3")));
}

#[test]
fn run_json_carries_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = |x: &str| dir.path().join(x);
    let (g, d) = count_fixture(dir.path(), 10, 2, 1);
    ok(&["--set", "data.match_rule=center:10", "--seed", "5", "evaluate", "--dets", s(&d), "--gt", s(&g), "--out", s(&p("a"))]);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("a/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "evaluate");
    assert_eq!(run["seed"], 5);
    assert_eq!(run["config"]["data.match_rule"], "center:10");
    assert_eq!(run["config"]["pipeline.merge_iou"], 0.5);
    // A key = value file works the same way.
    fs::write(p("x.conf"), "# test\npreset = desk\nloss.gamma = 1.0\n").unwrap();
    ok(&["--config", s(&p("x.conf")), "evaluate", "--dets", s(&d), "--gt", s(&g), "--out", s(&p("b"))]);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("b/run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["loss.gamma"], 1.0);
    assert_eq!(run["config"]["classifier.dims"], serde_json::json!([16, 32, 64, 128]));
}

#[test]
fn tile_writes_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let p = |x: &str| dir.path().join(x);
    ok(&["synth", "--n", "1", "--seed", "1", "--out", s(&p("data"))]);
    ok(&["tile", "--data", s(&p("data")), "--out", s(&p("tiles"))]);
    let patches = fs::read_to_string(p("tiles/patches.csv")).unwrap();
    assert_eq!(patches.lines().count(), 1 + 9);
    assert!(p("tiles/patches/synth_000_x512_y512.png").exists());
    let anns = fs::read_to_string(p("tiles/patch_annotations.csv")).unwrap();
    assert!(anns.lines().count() > 15, "every object lands in at least one patch");
}

#[test]
fn sweep_recall_falls_with_conf() {
    let dir = tempfile::tempdir().unwrap();
    let p = |x: &str| dir.path().join(x);
    let cache = r#"{"image_id":"a","conf_floor":0.0,"entries":[
        {"detection":{"bbox":{"x":75.0,"y":75.0,"w":50.0,"h":50.0},"score":0.9,"label":0,"frame":"Global","patch_id":null,"id":0},"class_score":0.9},
        {"detection":{"bbox":{"x":275.0,"y":75.0,"w":50.0,"h":50.0},"score":0.3,"label":0,"frame":"Global","patch_id":null,"id":1},"class_score":0.7}]}"#;
    fs::create_dir(p("caches")).unwrap();
    fs::write(p("caches/a.json"), cache).unwrap();
    fs::write(p("gt.csv"), "image_id,cx,cy,label\na,100,100,mitosis\na,300,100,mitosis\n").unwrap();
    let out = ok(&["sweep", "--caches", s(&p("caches")), "--gt", s(&p("gt.csv")), "--conf", "0.1,0.5", "--classifier", "0.5", "--merge", "0.5", "--out", s(&p("sw"))]);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "conf,classifier,merge_iou,tp,fp,fn,p,r,f1");
    assert!(rows[1].starts_with("0.1,0.5,0.5,2,0,0,"), "{out}");
    assert!(rows[2].starts_with("0.5,0.5,0.5,1,0,1,"), "{out}");
}

#[test]
fn exit_codes() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["evaluate", "--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["--set", "proposer.no_such_key=1", "synth", "--out", "/nonexistent/x"]), 1);
    assert_eq!(code(&["--set", "loss.gamma=abc", "synth", "--out", "/nonexistent/x"]), 1);
    assert_eq!(code(&["--set", "proposer.conf_threshold=2", "synth", "--out", "/nonexistent/x"]), 1);
    assert_eq!(code(&["evaluate", "--dets", "/nonexistent/d.csv", "--gt", "/nonexistent/g.csv"]), 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "a,b\n1,2\n").unwrap();
    assert_eq!(code(&["evaluate", "--dets", s(&bad), "--gt", s(&bad)]), 1);
}

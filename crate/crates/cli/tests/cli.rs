use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn segrefine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segrefine"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path, noise: &str) -> std::path::PathBuf {
    ok(segrefine(&["synth", "--out", p(dir), "--noise", noise, "--seed", "3"]));
    dir.join("manifest.json")
}

#[test]
fn run_reports_perfect_miou_on_clean_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("b"), "0");
    let out = tmp.path().join("out");
    let gt = tmp.path().join("b/gt.stf");
    let stdout = ok(segrefine(&[
        "run",
        "--manifest",
        p(&manifest),
        "--out",
        p(&out),
        "--gt",
        p(&gt),
    ]));
    assert!(stdout.contains("mIoU 1.0000"), "{stdout}");
    let metrics = read_json(&out.join("metrics.json"));
    assert_eq!(metrics["miou"], 1.0);
    assert!(metrics["per_class_iou"]["road"].is_null());
    assert!(fs::read(out.join("labels.png")).unwrap().starts_with(b"\x89PNG"));
    assert!(out.join("labels.stf").is_file());
    assert!(!out.join("q.stf").exists());
}

#[test]
fn stages_chained_by_hand_match_the_fused_run() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("b"), "0.1");
    let fused = tmp.path().join("fused");
    ok(segrefine(&[
        "run",
        "--manifest",
        p(&manifest),
        "--out",
        p(&fused),
        "--debug",
    ]));
    for f in [
        "s_clip.stf",
        "feat_dino.stf",
        "t_clip.stf",
        "sg_dino.stf",
        "superpixels.stf",
        "q.stf",
        "convergence.csv",
    ] {
        assert!(fused.join(f).is_file(), "{f}");
    }

    let caf = tmp.path().join("caf");
    let diff = tmp.path().join("diff");
    let sp = tmp.path().join("sp");
    let solve = tmp.path().join("solve");
    ok(segrefine(&["caf", "--manifest", p(&manifest), "--out", p(&caf)]));
    ok(segrefine(&["diffuse", "--input", p(&caf), "--out", p(&diff)]));
    let image = tmp.path().join("b/image.stf");
    let segments = ok(segrefine(&["superpixels", "--image", p(&image), "--out", p(&sp)]));
    assert!(segments.trim().ends_with("segments"), "{segments}");
    assert!(sp.join("superpixels.png").is_file());
    ok(segrefine(&[
        "solve",
        "--input",
        p(&diff),
        "--superpixels",
        p(&sp.join("superpixels.stf")),
        "--out",
        p(&solve),
    ]));

    for (a, b) in [
        (caf.join("s_clip.stf"), fused.join("s_clip.stf")),
        (diff.join("sg_clip.stf"), fused.join("sg_clip.stf")),
        (sp.join("superpixels.stf"), fused.join("superpixels.stf")),
        (solve.join("q.stf"), fused.join("q.stf")),
        (solve.join("labels.stf"), fused.join("labels.stf")),
        (solve.join("labels.png"), fused.join("labels.png")),
    ] {
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{}", a.display());
    }

    let report = ok(segrefine(&[
        "eval",
        "--pred",
        p(&solve.join("labels.stf")),
        "--gt",
        p(&tmp.path().join("b/gt.stf")),
        "--manifest",
        p(&manifest),
    ]));
    assert!(report.contains("\"miou\""), "{report}");
    assert!(report.contains("\"meadow\""), "{report}");
}

#[test]
fn precision_and_thread_count_do_not_change_clean_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("b"), "0");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b32");
    ok(segrefine(&["run", "--manifest", p(&manifest), "--out", p(&a)]));
    let out = Command::new(env!("CARGO_BIN_EXE_segrefine"))
        .env("SEGREFINE_THREADS", "1")
        .args(["run", "--manifest", p(&manifest), "--out", p(&b), "--precision", "f32"])
        .output()
        .unwrap();
    ok(out);
    assert_eq!(
        fs::read(a.join("labels.png")).unwrap(),
        fs::read(b.join("labels.png")).unwrap()
    );
}

#[test]
fn batch_merges_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("bundles");
    synth(&root.join("one"), "0");
    synth(&root.join("two"), "0");
    let out = tmp.path().join("out");
    let stdout = ok(segrefine(&["batch", "--root", p(&root), "--out", p(&out)]));
    assert!(stdout.contains("processed 2 bundles"), "{stdout}");
    assert_eq!(read_json(&out.join("metrics.json"))["pixels_evaluated"], 2 * 32 * 32);
    assert!(out.join("one/labels.png").is_file() && out.join("two/labels.png").is_file());
}

#[test]
fn exit_codes_follow_failure_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(&tmp.path().join("b"), "0");
    let out = tmp.path().join("out");

    let bad_cfg = tmp.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"diffusion": {"alpha": 1.5}}"#).unwrap();
    let res = segrefine(&[
        "run",
        "--manifest",
        p(&manifest),
        "--config",
        p(&bad_cfg),
        "--out",
        p(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));

    let unknown = tmp.path().join("unknown.json");
    fs::write(&unknown, r#"{"graph": {"neighbours": 3}}"#).unwrap();
    let res = segrefine(&[
        "run",
        "--manifest",
        p(&manifest),
        "--config",
        p(&unknown),
        "--out",
        p(&out),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("neighbours"));

    let partial = tmp.path().join("partial.json");
    fs::write(&partial, r#"{"image": "image.stf", "grid_clip": [8, 8]}"#).unwrap();
    let res = segrefine(&["run", "--manifest", p(&partial), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(
        stderr.contains("load stage") && stderr.contains("clip_layer_features"),
        "{stderr}"
    );

    let res = segrefine(&["run", "--manifest", p(&tmp.path().join("nope.json")), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(3));
}

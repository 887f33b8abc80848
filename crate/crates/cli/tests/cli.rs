use std::path::Path;
use std::process::{Command, Output};

fn orchard_seg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orchard-seg"))
        .args(args)
        .current_dir(dir)
        .env("ORCHARD_SEG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = orchard_seg(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &["--density", "1500", "--leaf-count", "800", "--fruit-count", "12"];

#[test]
fn eval_of_identical_files_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["synth", "--seed", "3", "--out", "s.ply"];
    args.extend_from_slice(SMALL);
    ok(&args, dir.path());
    let csv = ok(&["eval", "s.ply", "s.ply"], dir.path());
    assert_eq!(csv.lines().next(), Some("class,iou"));
    assert_eq!(csv.lines().last(), Some("mean,1"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = orchard_seg(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(orchard_seg(&["partition", "x.ply", "--blocks", "1000", "--out", "p"], dir.path()).status.code(), Some(1));
    assert_eq!(orchard_seg(&["eval", "a.txt", "b.txt"], dir.path()).status.code(), Some(1));
    assert_eq!(orchard_seg(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(orchard_seg(&["eval", "missing.ply", "missing.ply"], dir.path()).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.ply"), "ply\nformat ascii 1.0\nelement vertex 2\nend_header\n").unwrap();
    assert_eq!(orchard_seg(&["voxelize", "bad.ply", "--out", "v.ply"], dir.path()).status.code(), Some(2));
}

#[test]
fn synth_writes_scene_and_recipe() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["synth", "--seed", "4", "--mode", "geometry-only", "--distance", "1.2", "--out", "g.ply"];
    args.extend_from_slice(SMALL);
    ok(&args, dir.path());
    let recipe: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(recipe["color_mode"], "geometry-only");
    assert_eq!(recipe["distance"], 1.2);
    assert!(recipe["points"].as_u64().unwrap() > recipe["fruit_points"].as_u64().unwrap());
}

#[test]
fn partition_and_voxelize_preserve_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["synth", "--seed", "5", "--out", "s.ply"];
    args.extend_from_slice(SMALL);
    ok(&args, dir.path());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
    let points = manifest["points"].as_u64().unwrap();

    ok(&["partition", "s.ply", "--blocks", "4096", "--out", "parts"], dir.path());
    let blocks: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("parts/manifest.json")).unwrap()).unwrap();
    let blocks = blocks.as_array().unwrap();
    let total: u64 = blocks.iter().map(|b| b["points"].as_u64().unwrap()).sum();
    assert_eq!(total, points);
    assert!(blocks.iter().all(|b| b["points"].as_u64().unwrap() <= 4096 || b["oversized"] == true));

    ok(&["voxelize", "s.ply", "--cell", "0.05", "--outlier-k", "0", "--out", "v.pcd"], dir.path());
    let text = std::fs::read_to_string(dir.path().join("v.pcd")).unwrap();
    let kept: u64 = text
        .lines()
        .find_map(|l| l.strip_prefix("POINTS "))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(kept > 0 && kept < points);
}

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use ease_core::tensors::read_label_map;
use ease_core::LabelMap;

fn ease(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ease")).args(args).output().unwrap()
}

fn ease_env(args: &[&str], key: &str, val: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ease")).args(args).env(key, val).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(root: &Path, kind: &str, count: &str) {
    let out = ease(&[
        "synth", "--kind", kind, "--out", s(&root.join("features")), "--gt", s(&root.join("gt")), "--count", count,
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn is_coarsening(fine: &LabelMap, coarse: &LabelMap) -> bool {
    let mut seen = std::collections::BTreeMap::new();
    fine.labels()
        .iter()
        .zip(coarse.labels())
        .all(|(&f, &c)| *seen.entry(f).or_insert(c) == c)
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn segment_emits_levels_that_coarsen_stage2() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "blob", "1");
    let out = ease(&["segment", "--features", s(&dir.path().join("features")), "--out", s(&dir.path().join("out"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = dir.path().join("out/img0000");
    let stage2 = read_label_map(img.join("stage2.tns")).unwrap();
    let manifest = std::fs::read_to_string(img.join("manifest.txt")).unwrap();
    let mut ks = BTreeSet::new();
    let mut i = 0;
    while img.join(format!("level_{i:03}.tns")).is_file() {
        let l = read_label_map(img.join(format!("level_{i:03}.tns"))).unwrap();
        assert!(is_coarsening(&stage2, &l));
        ks.insert(l.num_segments());
        i += 1;
    }
    assert!(i > 0);
    assert!(ks.contains(&3), "levels {ks:?}");
    assert!(manifest.contains("level.0.k="), "{manifest}");
}

#[test]
fn segment_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "blob", "3");
    let features = dir.path().join("features");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(ease_env(&["segment", "--features", s(&features), "--out", s(&a)], "EASE_THREADS", "1").status.success());
    assert!(ease_env(&["segment", "--features", s(&features), "--out", s(&b)], "EASE_THREADS", "3").status.success());
    for id in ["img0000", "img0001", "img0002"] {
        assert_eq!(read_dir_bytes(&a.join(id)), read_dir_bytes(&b.join(id)));
    }
}

#[test]
fn eval_reports_perfect_score_on_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "blob", "2");
    let gt = dir.path().join("gt");
    let csv = dir.path().join("classes.csv");
    let out = ease(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--csv", s(&csv)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("miou=1"), "{text}");
    assert!(text.contains("images=2"), "{text}");
    assert!(std::fs::read_to_string(csv).unwrap().lines().count() > 1);
}

#[test]
fn calibrate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "crack", "1");
    let cfg = dir.path().join("ease.cfg");
    std::fs::write(&cfg, "min_size = 20\nbetas = 0, 2\n").unwrap();
    let report = dir.path().join("report");
    let out = ease(&[
        "calibrate", "--config", s(&cfg), "--features", s(&dir.path().join("features")), "--gt",
        s(&dir.path().join("gt")), "--out", s(&report),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(report.join("report.txt")).unwrap();
    assert_eq!(text, String::from_utf8(out.stdout).unwrap());
    assert!(text.contains("best.beta_bnd=2"), "{text}");
}

#[test]
fn colorize_writes_ppm_with_black_background() {
    let dir = tempfile::tempdir().unwrap();
    let l = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
    let input = dir.path().join("l.tns");
    ease_core::write_tensor(&input, &ease_core::Tensor::from(&l)).unwrap();
    let ppm = dir.path().join("l.ppm");
    assert!(ease(&["colorize", "--in", s(&input), "--out", s(&ppm)]).status.success());
    let bytes = std::fs::read(ppm).unwrap();
    let header = b"P6\n2 2\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    let px: Vec<&[u8]> = bytes[header.len()..].chunks(3).collect();
    assert_eq!(px.len(), 4);
    assert_eq!(px[0], [0, 0, 0]);
    let colors: BTreeSet<&[u8]> = px[1..].iter().copied().collect();
    assert_eq!(colors.len(), 3);
    assert!(!colors.contains(&[0u8, 0, 0][..]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ease(&["--help"]).status.code(), Some(0));
    assert_eq!(ease(&["bogus"]).status.code(), Some(1));
    assert_eq!(ease(&["segment", "--out", s(dir.path())]).status.code(), Some(1));

    let missing = dir.path().join("nope");
    assert_eq!(ease(&["segment", "--features", s(&missing), "--out", s(dir.path())]).status.code(), Some(2));

    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let out = ease(&["segment", "--config", s(&cfg), "--features", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    let garbage = dir.path().join("garbage.tns");
    std::fs::write(&garbage, b"not a tensor").unwrap();
    let out = ease(&["colorize", "--in", s(&garbage), "--out", s(&dir.path().join("x.ppm"))]);
    assert_eq!(out.status.code(), Some(3));

    assert_eq!(ease_env(&["--version"], "EASE_THREADS", "1").status.code(), Some(0));
    synth(dir.path(), "blob", "1");
    let out = ease_env(
        &["segment", "--features", s(&dir.path().join("features")), "--out", s(&dir.path().join("o"))],
        "EASE_THREADS",
        "zero",
    );
    assert_eq!(out.status.code(), Some(1));
}

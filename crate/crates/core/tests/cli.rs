use std::path::Path;
use std::process::{Command, Output};

fn semsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semsplat"))
        .args(args)
        .env("SEMSPLAT_THREADS", "2")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path) -> Output {
    semsplat(&["synth", "--seed", "7", "--classes", "6", "--objects", "4", "--resolution", "64", "--out", dir.to_str().unwrap()])
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(synth(a.path()).status.success());
    assert!(synth(b.path()).status.success());
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 19);
    assert_eq!(fa, fb);
}

#[test]
fn eval_on_identical_maps() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    let l = d.path().join("view_002_labels.pgm");
    let o = semsplat(&["eval", "--pred", l.to_str().unwrap(), "--gt", l.to_str().unwrap(), "--classes", "6"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("miou=1 "), "{}", stdout(&o));
}

#[test]
fn render_reports_one_gaussian_per_input_pixel() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    let b = d.path().to_str().unwrap();
    let run = |prefix: &str| {
        let out = d.path().join(prefix);
        let o = semsplat(&["render", "--bundle", b, "--inputs", "0,1", "--target", "3", "--candidates", "32", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("gaussians=8192"), "{}", stdout(&o));
        ["_rgb.ppm", "_labels.pgm", "_depth.pgm", "_probs.archive"].map(|s| std::fs::read(d.path().join(format!("{prefix}{s}"))).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn render_from_an_explicit_pose() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    let out = d.path().join("p");
    let o = semsplat(&[
        "render", "--bundle", d.path().to_str().unwrap(), "--inputs", "0,1", "--pose", "1,0,0,0,0,-0.2,0.5",
        "--candidates", "16", "--decode-at", "features", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("gaussians=512"));
}

#[test]
fn depth_writes_one_map_per_view() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    let out = d.path().join("depth");
    let o = semsplat(&["depth", "--bundle", d.path().to_str().unwrap(), "--views", "1,2", "--candidates", "16", "--raw-features", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("depth_001.pgm").is_file() && out.join("depth_002.pgm").is_file());
}

#[test]
fn exit_codes() {
    assert_eq!(semsplat(&["eval", "--nonsense"]).status.code(), Some(1));
    let o = semsplat(&["render", "--bundle", "/definitely/missing", "--inputs", "0,1", "--target", "2", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(1));
    let d = tempfile::tempdir().unwrap();
    synth(d.path());
    let l = d.path().join("view_000_labels.pgm");
    let o = semsplat(&["eval", "--pred", l.to_str().unwrap(), "--gt", l.to_str().unwrap(), "--classes", "2"]);
    assert_eq!(o.status.code(), Some(1));
    let bad = Command::new(env!("CARGO_BIN_EXE_semsplat")).args(["gradcheck"]).env("SEMSPLAT_THREADS", "many").output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

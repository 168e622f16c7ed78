use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SPEC: &str = "canvas_height=32\ncanvas_width=32\nnum_classes=3\nlines_min=1\nlines_max=1\nchars_min=1\nchars_max=1\n";
const CONFIG: &str = "growth_rate=4\nblock_depth=1\nhidden_size=16\nembed_size=16\nattention_size=16\nmax_decode_len=6\nmax_epochs=1\n";

fn kzread(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kzread"))
        .args(args)
        .env("KZREAD_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = kzread(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = kzread(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    err
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(count: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("spec.txt"), SPEC).unwrap();
        fs::write(root.join("run.txt"), CONFIG).unwrap();
        let f = Self { _dir: dir, root };
        ok(&["synth", "--spec", &f.s("spec.txt"), "--count", &count.to_string(), "--out", &f.s("data"), "--seed", "4"]);
        f
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.p(rel).to_string_lossy().into_owned()
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn synth_writes_a_complete_dataset() {
    let f = Fixture::new(10);
    for file in ["labels.tsv", "vocab.txt", "split.json", "placements.tsv", "images/doc00009.pgm"] {
        assert!(f.p("data").join(file).is_file(), "{file} missing");
    }
    let labels = fs::read_to_string(f.p("data/labels.tsv")).unwrap();
    assert_eq!(labels.lines().count(), 10);
    let split = fs::read_to_string(f.p("data/split.json")).unwrap();
    assert!(split.contains("\"validation\""));

    ok(&["synth", "--spec", &f.s("spec.txt"), "--count", "10", "--out", &f.s("again"), "--seed", "4"]);
    for file in ["labels.tsv", "split.json", "placements.tsv", "images/doc00003.pgm"] {
        assert_eq!(read(&f.p("data").join(file)), read(&f.p("again").join(file)), "{file}");
    }
}

#[test]
fn synth_zero_is_an_empty_valid_dataset() {
    let f = Fixture::new(0);
    assert_eq!(fs::read_to_string(f.p("data/labels.tsv")).unwrap(), "");
    let stdout = fails(&["eval", "--data", &f.s("data"), "--checkpoint", &f.s("none.ckpt")]);
    assert!(stdout.contains("none.ckpt"));
}

#[test]
fn train_resume_eval_recognize() {
    let f = Fixture::new(12);
    let zero = f.p("zero.txt");
    fs::write(&zero, CONFIG.replace("max_epochs=1", "max_epochs=0")).unwrap();
    ok(&["train", "--data", &f.s("data"), "--config", &f.s("zero.txt"), "--out", &f.s("z")]);
    assert!(f.p("z/best.ckpt").is_file() && f.p("z/last.ckpt").is_file());
    assert_eq!(fs::read_to_string(f.p("z/train_log.csv")).unwrap().lines().count(), 1);

    ok(&["train", "--data", &f.s("data"), "--config", &f.s("run.txt"), "--out", &f.s("m")]);
    let two = f.p("two.txt");
    fs::write(&two, CONFIG.replace("max_epochs=1", "max_epochs=2")).unwrap();
    let out = ok(&[
        "train", "--data", &f.s("data"), "--config", &f.s("two.txt"), "--out", &f.s("m"), "--resume", &f.s("m/last.ckpt"),
    ]);
    assert!(out.contains("epochs=2"), "{out}");
    let log = fs::read_to_string(f.p("m/train_log.csv")).unwrap();
    let epochs: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2"]);

    let other = f.p("other.txt");
    fs::write(&other, CONFIG.replace("hidden_size=16", "hidden_size=8")).unwrap();
    let err = fails(&[
        "train", "--data", &f.s("data"), "--config", &f.s("other.txt"), "--out", &f.s("m"), "--resume", &f.s("m/last.ckpt"),
    ]);
    assert!(err.contains("differs"), "{err}");

    let err = fails(&["eval", "--data", &f.s("data"), "--checkpoint", &f.s("m/last.ckpt")]);
    assert!(err.contains("test split") && err.contains("empty"), "{err}");
    let out = ok(&[
        "eval", "--data", &f.s("data"), "--checkpoint", &f.s("m/last.ckpt"), "--split", "validation", "--json", &f.s("r.json"),
    ]);
    assert!(out.starts_with("split=validation\ncer="), "{out}");
    let json = fs::read_to_string(f.p("r.json")).unwrap();
    assert!(json.contains("\"ser\"") && json.contains("\"edit_distances\""));

    let trace = f.p("trace");
    let out = ok(&[
        "recognize", "--image", &f.s("data/images/doc00000.pgm"), "--checkpoint", &f.s("m/last.ckpt"), "--trace", &f.s("trace"),
    ]);
    let emitted = out.split_whitespace().count();
    let frames = fs::read_to_string(trace.join("frames.tsv")).unwrap().lines().count() - 1;
    assert!(frames == emitted + 1 || frames == 6, "{frames} frames for {emitted} tokens");
    assert!(trace.join("step_000.png").is_file());

    // a 30×30 page is padded to 32×32
    let png = f.p("small.png");
    image_fixture(&png, 30, 30);
    let out = kzread(&["recognize", "--image", &f.s("small.png"), "--checkpoint", &f.s("m/last.ckpt")]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("padded 30×30 image to 32×32"));
}

fn image_fixture(path: &Path, w: usize, h: usize) {
    // plain binary graymap, white page with a dark bar
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for _ in 0..w {
            bytes.push(if y == h / 2 { 0 } else { 255 });
        }
    }
    fs::write(path, bytes).unwrap();
}

#[test]
fn sweep_reports_sorted_rows() {
    let f = Fixture::new(12);
    let out = ok(&[
        "sweep", "--data", &f.s("data"), "--config", &f.s("run.txt"), "--grid", "4x1", "--out", &f.s("one.csv"),
    ]);
    assert_eq!(out.lines().count(), 2);
    assert!(out.starts_with("growth_rate,block_depth,"));
    ok(&[
        "sweep", "--data", &f.s("data"), "--config", &f.s("run.txt"), "--grid", "4x1,2x1", "--out", &f.s("two.csv"),
    ]);
    let csv = fs::read_to_string(f.p("two.csv")).unwrap();
    let cers: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(7).unwrap().parse().unwrap()).collect();
    assert_eq!(cers.len(), 2);
    assert!(cers[0] <= cers[1]);
    let err = fails(&["sweep", "--data", &f.s("data"), "--grid", "4by1", "--out", &f.s("x.csv")]);
    assert!(err.contains("KxD"), "{err}");
}

#[test]
fn errors_are_single_lines() {
    let f = Fixture::new(2);
    fs::write(f.p("bad.txt"), "growth_rate=4\nlearning_rate=0.1\n").unwrap();
    let err = fails(&["train", "--data", &f.s("data"), "--config", &f.s("bad.txt"), "--out", &f.s("o")]);
    assert!(err.contains("bad.txt:2"), "{err}");
    fails(&["train", "--data", &f.s("missing"), "--out", &f.s("o")]);
    fails(&["recognize", "--image", &f.s("missing.pgm"), "--checkpoint", &f.s("x.ckpt")]);
}

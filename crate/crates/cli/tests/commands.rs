use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dlabel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlabel"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("DLABEL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str, size: &str) {
    let o = dlabel(&["synth", "--out", p(dir), "--seed", seed, "--train", "2", "--val", "1", "--size", size]);
    assert_eq!(code(&o), 0, "{}", text(&o));
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

/// A one-epoch FPL run small enough for a test.
fn tiny_config(dir: &Path, manifest: &Path) -> PathBuf {
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "[data]\nmanifest = {:?}\n\n[arch]\ntag = \"fpl\"\nwidth_divisor = 16\n\n[train]\nschedule = [[1, 0.001]]\nminibatches_per_epoch = 2\nval_patches = 4\nseed = 5\n\n[sampler]\nminibatch = 4\nsuperbatch = 16\n",
            p(manifest)
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn gradcheck_passes_and_names_a_corrupted_layer() {
    let ok = dlabel(&["gradcheck", "--cases", "3"]);
    assert_eq!(code(&ok), 0, "{}", text(&ok));
    let bad = dlabel(&["gradcheck", "--kinds", "conv,lrelu", "--cases", "3", "--corrupt", "conv"]);
    assert_eq!(code(&bad), 4, "{}", text(&bad));
    let out = text(&bad);
    assert!(out.lines().any(|l| l.contains("conv") && l.contains("FAIL")), "{out}");
    assert!(out.lines().any(|l| l.contains("lrelu") && l.ends_with("ok")), "{out}");
}

#[test]
fn configuration_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = dlabel(&["gradcheck", "--kinds", "nonsense"]);
    assert_eq!(code(&unknown), 2, "{}", text(&unknown));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let o = dlabel(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("x.ck"))]);
    assert_eq!(code(&o), 2, "{}", text(&o));
    assert_eq!(text(&o).trim().lines().count(), 1, "one-line cause: {}", text(&o));

    let missing = dlabel(&["predict", "--checkpoint", p(&dir.path().join("none.ck")), "--image", "x.png", "--out", p(dir.path())]);
    assert_eq!(code(&missing), 2, "{}", text(&missing));

    let garbage = dir.path().join("garbage.ck");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let img = dir.path().join("img.png");
    std::fs::write(&img, b"").unwrap();
    let o = dlabel(&["predict", "--checkpoint", p(&garbage), "--image", p(&img), "--out", p(dir.path())]);
    assert_eq!(code(&o), 3, "{}", text(&o));
}

#[test]
fn synth_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), "3", "160");
    synth(b.path(), "3", "160");
    let (fa, fb) = (sorted_files(a.path()), sorted_files(b.path()));
    assert_eq!(fa.len(), fb.len());
    assert!(fa.iter().any(|f| f.file_name().unwrap() == "manifest.txt"));
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        let (bx, by) = (std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        // The manifest records its own directory only through relative paths.
        assert_eq!(bx, by, "{}", x.display());
    }
}

#[test]
fn train_predict_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "4", "256");
    let manifest = data.join("manifest.txt");
    let cfg = tiny_config(dir.path(), &manifest);

    let (ck1, ck2) = (dir.path().join("a.ck"), dir.path().join("b.ck"));
    for ck in [&ck1, &ck2] {
        let o = dlabel(&["train", "--config", p(&cfg), "--out", p(ck)]);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    assert_eq!(std::fs::read(&ck1).unwrap(), std::fs::read(&ck2).unwrap(), "identical runs, identical checkpoints");

    // A full-size synthetic tile for the single-image path.
    let big = dir.path().join("big");
    let o = dlabel(&["synth", "--out", p(&big), "--seed", "4", "--train", "1", "--val", "0", "--size", "512"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let preds = dir.path().join("preds");
    std::fs::create_dir(&preds).unwrap();
    let rgb = big.join("synth-000_rgb.png");
    let height = big.join("synth-000_height.png");
    let o = dlabel(&["predict", "--checkpoint", p(&ck1), "--image", p(&rgb), "--height", p(&height), "--out", p(&preds)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let map = image::open(preds.join("synth-000_rgb_pred.png")).unwrap();
    assert_eq!((map.width(), map.height()), (512, 512));

    // Manifest mode, twice, byte-identical maps.
    let (m1, m2) = (dir.path().join("m1"), dir.path().join("m2"));
    for out in [&m1, &m2] {
        std::fs::create_dir(out).unwrap();
        let o = dlabel(&["predict", "--checkpoint", p(&ck1), "--manifest", p(&manifest), "--out", p(out), "--scores"]);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    for (x, y) in sorted_files(&m1).iter().zip(&sorted_files(&m2)) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }

    let report = dir.path().join("report.txt");
    let o = dlabel(&["evaluate", "--manifest", p(&manifest), "--predictions", p(&m1), "--report", p(&report)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let kv = std::fs::read_to_string(&report).unwrap();
    assert!(kv.lines().any(|l| l.starts_with("full.oa")), "{kv}");
}

#[test]
fn evaluating_a_reference_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "6", "160");
    let labels = dir.path().join("synth-000_labels.png");
    let report = dir.path().join("r.txt");
    let o = dlabel(&["evaluate", "--pred", p(&labels), "--reference", p(&labels), "--report", p(&report)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let kv = std::fs::read_to_string(&report).unwrap();
    for key in ["full.oa", "full.kappa", "full.aa", "full.f1", "er_full.oa", "nobk.oa", "er_nobk.oa"] {
        let line = kv.lines().find(|l| l.starts_with(&format!("{key} "))).unwrap_or_else(|| panic!("{key} missing: {kv}"));
        let v: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert_eq!(v, 1.0, "{line}");
    }
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn odigen(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_odigen")).args(args).env("RUST_LOG", "warn").output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> Output {
    let out = odigen(args);
    assert!(out.status.success(), "odigen {args:?} failed");
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_then_prepare_gives_sixty_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, pairs) = (dir.path().join("corpus"), dir.path().join("pairs"));
    ok(&["synth-data", "--classes", "3", "--count", "20", "--size", "32", "--out", p(&corpus)]);
    ok(&["prepare", "--corpus", p(&corpus), "--size", "32", "--out", p(&pairs)]);
    let manifest = fs::read_to_string(pairs.join("manifest.txt")).unwrap();
    let rows: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 60);
    assert_eq!(rows.iter().filter(|r| r.ends_with("\ttrain")).count(), 45);
    assert!(fs::read_to_string(pairs.join("config.txt")).unwrap().contains("min-class-size = 10"));
}

#[test]
fn continuity_of_constant_png_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("flat.png");
    image_file(&img);
    let out = dir.path().join("eval");
    let o = ok(&["evaluate", "--method", "continuity", "--input", p(&img), "--out", p(&out)]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for k in ["sigma_top", "sigma_bottom", "sigma_lr"] {
        assert_eq!(v["mean"][k], 0.0, "{k}");
    }
    assert!(out.join("report.json").is_file());
}

fn image_file(path: &Path) {
    image::RgbImage::from_pixel(16, 8, image::Rgb([120, 30, 200])).save(path).unwrap();
}

#[test]
fn generate_is_reproducible_and_stays_in_out() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    ok(&["synth-data", "--classes", "2", "--count", "4", "--size", "32", "--out", p(&d("corpus"))]);
    ok(&["prepare", "--corpus", p(&d("corpus")), "--size", "32", "--min-class-size", "2", "--out", p(&d("pairs"))]);
    ok(&["train", "--pairs", p(&d("pairs")), "--channels", "8", "--iters", "3", "--out", p(&d("model"))]);
    assert!(d("model").join("generator.ckpt").is_file());
    assert_eq!(fs::read_to_string(d("model").join("generator_losses.tsv")).unwrap().lines().count(), 4);
    ok(&["reproject", "--input", p(&d("corpus").join("class_01").join("0002.png")), "--out", p(&d("view"))]);
    let snap = d("view").join("view.png");
    let gen = |out: &str| {
        ok(&[
            "generate", "--checkpoint", p(&d("model").join("generator.ckpt")), "--input", p(&snap),
            "--class-from", "ideal:class_01", "--seed", "5", "--reps", "2", "--out", p(&d(out)),
        ]);
        (fs::read(d(out).join("odi_000.png")).unwrap(), fs::read(d(out).join("odi_001.png")).unwrap())
    };
    let (a0, a1) = gen("gen_a");
    let (b0, b1) = gen("gen_b");
    assert_eq!(a0, b0);
    assert_eq!(a1, b1);
    assert_ne!(a0, a1);
    let mut listed: Vec<String> =
        fs::read_dir(d("gen_a")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    listed.sort();
    assert_eq!(listed, ["config.txt", "generation.json", "odi_000.png", "odi_001.png"]);
    let mut top: Vec<String> =
        fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    top.sort();
    assert_eq!(top, ["corpus", "gen_a", "gen_b", "model", "pairs", "view"]);

    // the echoed config replays the run
    let replay = d("gen_a").join("config.txt");
    let text = fs::read_to_string(&replay).unwrap().replace(p(&d("gen_a")), p(&d("gen_c")));
    fs::write(d("replay.txt"), text).unwrap();
    ok(&["generate", "--config", p(&d("replay.txt"))]);
    assert_eq!(fs::read(d("gen_c").join("odi_000.png")).unwrap(), a0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    assert_eq!(odigen(&["train", "--bogus", "1"]).status.code(), Some(2));
    assert_eq!(odigen(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(odigen(&["reproject", "--out", out]).status.code(), Some(2));
    let missing = dir.path().join("nope.png");
    assert_eq!(odigen(&["reproject", "--input", p(&missing), "--out", out]).status.code(), Some(3));
    assert_eq!(odigen(&["train", "--pairs", p(&dir.path().join("none")), "--out", out]).status.code(), Some(3));
}

#[test]
fn classifiers_evaluation_and_specific_models() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    ok(&["synth-data", "--classes", "2", "--count", "4", "--size", "32", "--out", p(&d("corpus"))]);
    ok(&["prepare", "--corpus", p(&d("corpus")), "--size", "32", "--min-class-size", "2", "--out", p(&d("pairs"))]);
    let pairs = p(&d("pairs")).to_string();
    for target in ["odi", "snapshot"] {
        let o = ok(&["train-classifier", "--pairs", &pairs, "--target", target, "--iters", "5", "--channels", "4", "--out", p(&d(target))]);
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(v["target"], target);
        assert_eq!(v["test_samples"], 2);
    }
    ok(&["train", "--pairs", &pairs, "--channels", "8", "--iters", "2", "--out", p(&d("shared"))]);
    let shared = d("shared").join("generator.ckpt");
    let odi_clf = d("odi").join("classifier.ckpt");
    let snap_clf = d("snapshot").join("classifier.ckpt");
    for method in ["odi", "views", "fid"] {
        let out = d(&format!("eval_{method}"));
        let o = ok(&[
            "evaluate", "--method", method, "--checkpoint", p(&shared), "--pairs", &pairs, "--classifier",
            p(if method == "views" { &snap_clf } else { &odi_clf }), "--conditioning", p(&snap_clf), "--reps", "2", "--views", "4", "--out", p(&out),
        ]);
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(v["method"], method);
        let r = &v["report"];
        match method {
            "fid" => {
                assert_eq!(r["n_real"], 2);
                assert_eq!(r["n_gen"], 4);
                assert_eq!(r["rank_deficient"], true);
            }
            _ => {
                let rate = r["macro_average"].as_f64().unwrap();
                assert!((0.0..=1.0).contains(&rate));
            }
        }
    }

    ok(&["train", "--pairs", &pairs, "--variant", "specific", "--channels", "8", "--iters", "2", "--out", p(&d("specific"))]);
    for class in ["class_00", "class_01"] {
        assert!(d("specific").join(format!("generator_{class}.ckpt")).is_file());
    }
    ok(&["reproject", "--input", p(&d("corpus").join("class_00").join("0001.png")), "--out", p(&d("view"))]);
    let o = ok(&[
        "generate", "--checkpoint", p(&d("specific")), "--input", p(&d("view").join("view.png")), "--class-from", "classifier",
        "--classifier", p(&snap_clf), "--out", p(&d("gen")),
    ]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let probs: f64 = v["probabilities"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((probs - 1.0).abs() < 1e-9);
    assert!(d("gen").join("odi_000.png").is_file());
    // per-class generators cannot be scored as one model
    let e = odigen(&[
        "evaluate", "--method", "odi", "--checkpoint", p(&d("specific")), "--pairs", &pairs, "--classifier", p(&odi_clf),
        "--out", p(&d("bad")),
    ]);
    assert_eq!(e.status.code(), Some(2));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to train in well under a second
epochs = 2
batch_size = 2
crop_size = 16
channels = 4
heads = 1
encoder_depth = 1
fusion_stages = 2
pool_size = 4
";

fn hazefuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hazefuse")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = hazefuse(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dataset_and_model(root: &Path, seed: &str) {
    let data = root.join("data");
    ok(&["synthesize", "--scenes", "3", "--height", "24", "--width", "20", "--seed", "4", "--out", s(&data)]);
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--seed", seed, "--out", s(&root.join("run"))]);
}

#[test]
fn synthesize_train_fuse_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    dataset_and_model(root, "1");
    let losses = fs::read_to_string(root.join("run/losses.csv")).unwrap();
    // 2 epochs of ceil(3 / 2) batches
    assert_eq!(losses.lines().count(), 1 + 4);

    let (ir, vi, ck) = (root.join("data/ir/0000.png"), root.join("data/vi/0000.png"), root.join("run/model.irvc"));
    let fused = root.join("fused");
    ok(&["fuse", "--ir", s(&ir), "--vis", s(&vi), "--checkpoint", s(&ck), "--out", s(&fused)]);
    for f in ["fused.png", "dehazed.png", "density.png", "density.irvf"] {
        assert!(fused.join(f).is_file(), "{f}");
    }
    let dehazed = root.join("dehazed");
    ok(&["dehaze", "--ir", s(&ir), "--vis", s(&vi), "--checkpoint", s(&ck), "--out", s(&dehazed)]);
    assert_eq!(fs::read(dehazed.join("dehazed.png")).unwrap(), fs::read(fused.join("dehazed.png")).unwrap());
    assert!(!dehazed.join("fused.png").exists());

    let eval = root.join("eval");
    fs::create_dir_all(eval.join("fused")).unwrap();
    for sub in ["ir", "gt"] {
        fs::create_dir_all(eval.join(sub)).unwrap();
        fs::copy(root.join("data").join(sub).join("0000.png"), eval.join(sub).join("0000.png")).unwrap();
    }
    fs::copy(fused.join("fused.png"), eval.join("fused/0000.png")).unwrap();
    let out = ok(&["evaluate", "--data", s(&eval), "--out", s(&eval)]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("image,q_mi,q_abf,q_scd,q_sf"));
    assert!(stdout.lines().any(|l| l.starts_with("0000,")));
    assert!(eval.join("metrics.json").is_file());
}

#[test]
fn synthesize_single_image() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synthesize", "--scenes", "1", "--height", "8", "--width", "8", "--out", s(&data)]);
    let out = dir.path().join("hazy");
    ok(&[
        "synthesize",
        "--clear",
        s(&data.join("gt/0000.png")),
        "--depth",
        s(&data.join("depth/0000.irvf")),
        "--beta",
        "1.0",
        "--out",
        s(&out),
    ]);
    assert!(out.join("hazy.png").is_file() && out.join("transmission.irvf").is_file());
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    dataset_and_model(a.path(), "9");
    dataset_and_model(b.path(), "9");
    for f in ["data/vi/0002.png", "data/depth/0001.irvf", "run/model.irvc", "run/losses.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(hazefuse(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(hazefuse(&["--help"]).status.code(), Some(0));

    let data = root.join("data");
    ok(&["synthesize", "--scenes", "1", "--height", "8", "--width", "8", "--out", s(&data)]);
    let cfg = root.join("typo.cfg");
    fs::write(&cfg, "no_hdee = true\n").unwrap();
    let out = hazefuse(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(root)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_hdee"));

    let missing_cfg = hazefuse(&["train", "--data", s(&data), "--config", s(&root.join("nope.cfg")), "--out", s(root)]);
    assert_eq!(missing_cfg.status.code(), Some(2));

    let ir = data.join("ir/0000.png");
    let vi = data.join("vi/0000.png");
    let missing_ck = hazefuse(&["fuse", "--ir", s(&ir), "--vis", s(&vi), "--checkpoint", s(&root.join("none.irvc")), "--out", s(root)]);
    assert_eq!(missing_ck.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_every_case() {
    let out = ok(&["gradcheck", "--seeds", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["conv2d 3x3", "channel attention", "fusion", "gradient loss", "total loss"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name}");
    }
    assert!(!text.contains("FAIL"));
}

#[test]
fn selftest_passes_and_exits_zero() {
    let out = ok(&["selftest"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 6, "{text}");
}

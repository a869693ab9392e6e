use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
net.stage_channels = 4, 8, 16
net.blocks = 1, 1, 1, 1, 1
train.epochs = 2
train.batch = 4
data.size = 32
data.count = 8
data.val_count = 4
";

fn bitsird(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitsird"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> (String, String) {
    (
        String::from_utf8_lossy(&o.stdout).into_owned(),
        String::from_utf8_lossy(&o.stderr).into_owned(),
    )
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn train(dir: &Path, cfg: &str, out: &str) -> Output {
    let out = dir.join(out);
    bitsird(&["train", "--quiet", "--config", cfg, "--out", out.to_str().unwrap()])
}

fn key_value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{key} missing from\n{report}"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn train_is_deterministic_and_eval_reproduces_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    for out in ["a", "b"] {
        let o = train(dir.path(), &cfg, out);
        assert!(o.status.success(), "{:?}", text(&o));
    }
    let a = fs::read(dir.path().join("a/final.ckpt")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/final.ckpt")).unwrap());
    assert!(dir.path().join("a/best.ckpt").exists());

    let report = fs::read_to_string(dir.path().join("a/report.txt")).unwrap();
    assert!(report.contains("epoch=2 "), "{report}");
    assert!(report.contains("k.enc0.0.bconv.act_k="));

    let eval_path = dir.path().join("eval.txt");
    let o = bitsird(&[
        "eval",
        "--checkpoint",
        dir.path().join("a/final.ckpt").to_str().unwrap(),
        "--config",
        &cfg,
        "--report",
        eval_path.to_str().unwrap(),
    ]);
    let (stdout, stderr) = text(&o);
    assert!(o.status.success(), "{stderr}");
    assert!(stdout.contains("Params") && stdout.contains("OPs"), "{stdout}");
    let eval = fs::read_to_string(eval_path).unwrap();
    for (train_key, eval_key) in [("final.miou", "metrics.miou"), ("final.pd", "metrics.pd"), ("final.fa_e5", "metrics.fa_e5")] {
        let (t, e) = (key_value(&report, train_key), key_value(&eval, eval_key));
        assert!((t - e).abs() <= 1e-9, "{train_key} {t} vs {e}");
    }
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "trian.lr = 0.1\n");
    let o = train(dir.path(), &cfg, "out");
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).1.contains("trian.lr"));
}

#[test]
fn non_finite_training_exits_3_with_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "hot.cfg", &format!("{TINY}train.lr = 1e300\n"));
    let o = train(dir.path(), &cfg, "out");
    let (_, stderr) = text(&o);
    assert_eq!(o.status.code(), Some(3), "{stderr}");
    assert!(stderr.contains("layer `"), "{stderr}");
}

#[test]
fn corrupt_and_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", &TINY.replace("train.epochs = 2", "train.epochs = 1"));
    assert!(train(dir.path(), &cfg, "run").status.success());
    let ckpt = dir.path().join("run/final.ckpt");
    let bytes = fs::read(&ckpt).unwrap();

    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = bitsird(&["eval", "--checkpoint", cut.to_str().unwrap(), "--config", &cfg]);
    let (_, stderr) = text(&o);
    assert_eq!(o.status.code(), Some(5), "{stderr}");
    assert!(stderr.contains("at byte"), "{stderr}");

    let wide = write_config(dir.path(), "wide.cfg", &TINY.replace("4, 8, 16", "8, 16, 32"));
    let o = bitsird(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", &wide]);
    let (_, stderr) = text(&o);
    assert_eq!(o.status.code(), Some(4), "{stderr}");
    assert!(stderr.contains("stem.weight"), "{stderr}");
}

#[test]
fn account_only_needs_no_data() {
    let o = bitsird(&["eval", "--account-only"]);
    let (stdout, _) = text(&o);
    assert!(o.status.success());
    assert!(stdout.contains("accounting.params_k"), "{stdout}");
    assert!(stdout.contains("bottleneck.4"), "{stdout}");
}

#[test]
fn check_suites_and_fault_injection() {
    let o = bitsird(&["check", "--suite", "grad"]);
    let (stdout, _) = text(&o);
    assert!(o.status.success(), "{stdout}");
    assert!(stdout.contains("PASS grad"));
    assert!(!stdout.contains("xnor"));

    let o = bitsird(&["check", "--suite", "xnor", "--inject-sign-fault"]);
    let (stdout, stderr) = text(&o);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout.contains("FAIL xnor"), "{stdout}");
    assert!(stderr.contains("xnor"), "{stderr}");
}

#[test]
fn bench_reports_exact_match() {
    let o = bitsird(&["bench", "--sizes", "16", "--channels", "4,8", "--min-time", "0"]);
    let (stdout, _) = text(&o);
    assert!(o.status.success());
    let rows: Vec<&str> = stdout.lines().filter(|l| l.contains('²')).collect();
    assert_eq!(rows.len(), 2, "{stdout}");
    assert!(rows.iter().all(|r| r.contains("true")), "{stdout}");
}

#[test]
fn dir_dataset_trains() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = bitsird::data::SceneConfig {
        size: (32, 32),
        ..Default::default()
    };
    let ds = bitsird::data::Dataset::synthetic(&scenes, 3, 2).unwrap();
    ds.write_dir(&dir.path().join("data")).unwrap();
    let cfg = write_config(
        dir.path(),
        "dir.cfg",
        &format!(
            "{}data.mode = dir\ndata.dir = {}\ndata.val_count = 2\n",
            TINY.replace("train.epochs = 2", "train.epochs = 1"),
            dir.path().join("data").display()
        ),
    );
    let o = train(dir.path(), &cfg, "out");
    assert!(o.status.success(), "{:?}", text(&o));
}

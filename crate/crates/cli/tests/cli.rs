use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use chestwsl::data::{generate_synthetic, write_dataset, Dataset, SyntheticSpec};

fn chestwsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chestwsl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TOY: &str = "net.preset = toy
head.m = 2
head.k_plus_train = 2
head.k_plus_test = 2
head.k_minus_test = 2
train.epochs = 1
train.batch_size = 8
data.resize = 64
data.crop = 64
";

/// Planted-disc images relabeled with two real finding names.
fn finding_dataset(dir: &Path) {
    let spec = SyntheticSpec::two_discs(3);
    let samples = generate_synthetic(&spec, 40).unwrap();
    let ds = Dataset { class_names: vec!["Cardiomegaly".into(), "Mass".into()], samples, has_boxes: true };
    write_dataset(dir, &ds).unwrap();
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let o = chestwsl(&[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_and_flag_fail() {
    let o = chestwsl(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));
    let o = chestwsl(&["gradcheck", "--no-such-flag"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn gradcheck_passes_on_clean_build() {
    let o = chestwsl(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("0 failed"));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn bad_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    finding_dataset(&data);
    let o = chestwsl(&["train", "--data", path(&data), "--out", path(&dir.path().join("run")), "--set", "head.nope=1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("head.nope"), "{}", stderr(&o));
    let o = chestwsl(&["train", "--data", path(&data), "--out", path(&dir.path().join("run")), "--set", "missing"]);
    assert!(!o.status.success());
}

#[test]
fn train_eval_localize_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    finding_dataset(&data);
    let conf = dir.path().join("toy.conf");
    fs::write(&conf, TOY).unwrap();
    let run = dir.path().join("run");

    let o = chestwsl(&["--sequential", "train", "--data", path(&data), "--out", path(&run), "--config", path(&conf)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["best.ckpt", "last.ckpt", "log.csv", "config.txt", "per_class_best.csv", "report.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(run.join("log.csv")).unwrap().starts_with("epoch,split,loss,macro_auroc\n"));
    let ck = run.join("best.ckpt");

    let ev = dir.path().join("ev");
    let o = chestwsl(&["eval", "--data", path(&data), "--checkpoint", path(&ck), "--out", path(&ev)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Cardiomegaly"));
    assert!(ev.join("classification.csv").exists() && ev.join("localization.csv").exists());

    // Architecture keys must match the checkpoint.
    let o = chestwsl(&["eval", "--data", path(&data), "--checkpoint", path(&ck), "--set", "head.m=3"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("hash"), "{}", stderr(&o));

    let loc = dir.path().join("loc");
    let o = chestwsl(&["localize", "--data", path(&data), "--checkpoint", path(&ck), "--out", path(&loc)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(loc.join("thresholds.txt")).unwrap(), "Cardiomegaly=0.8\nMass=0.9\n");
    let o = chestwsl(&[
        "localize",
        "--data",
        path(&data),
        "--checkpoint",
        path(&ck),
        "--out",
        path(&loc),
        "--threshold-cardiomegaly",
        "0.55",
        "--heatmaps",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("Cardiomegaly=0.55"));
    assert_eq!(fs::read_to_string(loc.join("thresholds.txt")).unwrap(), "Cardiomegaly=0.55\nMass=0.9\n");
    assert!(fs::read_to_string(loc.join("boxes.csv")).unwrap().starts_with("image_id,class_name,x,y,w,h,score\n"));
    assert!(fs::read_dir(loc.join("heatmaps")).unwrap().count() > 0);

    let sw = dir.path().join("sweep.csv");
    let o = chestwsl(&[
        "sweep",
        "--data",
        path(&data),
        "--checkpoint",
        path(&ck),
        "--alpha",
        "0.25,0.5,1",
        "--out",
        path(&sw),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("3 rows, 0 training runs"), "{}", stdout(&o));
    assert_eq!(fs::read_to_string(&sw).unwrap().lines().count(), 4);
}

#[test]
fn synth_gen_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("synth");
    let o = chestwsl(&["synth-gen", "--out", path(&out), "--n", "5", "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ds = chestwsl::data::load_dataset(&out).unwrap();
    assert_eq!(ds.len(), 5);
    assert_eq!(ds.class_names, vec!["Bright_Disc", "Dark_Disc"]);
    assert!(ds.has_boxes);
}

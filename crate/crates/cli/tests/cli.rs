use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_guidecomp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn guidecomp")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny configuration that trains in seconds; quality is irrelevant here.
fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "net.c1 = 2\nnet.c2 = 2\nnet.emb_dim = 2\nnet.time_dim = 2\n\
         train_steps = 10\nn_target = 8\nn_synth = 8\n\
         base_steps = 2\npose_steps = 2\nattr_steps = 2\n\
         batch_size = 2\nsample_steps = 3\nseed = 7\n",
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn unknown_subcommand_exits_1_with_synopsis() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("Usage"), "no synopsis in: {err}");
}

#[test]
fn help_exits_0_and_documents_config_keys() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    for sub in [
        "gen-data",
        "train-base",
        "train-control",
        "sample",
        "grid",
        "eval-domain",
        "eval-shape",
        "eval-body",
        "ablate",
        "report",
    ] {
        assert!(text.contains(sub), "--help missing {sub}");
    }
}

#[test]
fn missing_checkpoint_is_a_named_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["--out", dir.path().to_str().unwrap(), "eval-domain"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("base.ckpt"));
}

#[test]
fn unknown_config_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "seed = 1\nbogus_knob = 2\n").unwrap();
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "eval-body",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bogus_knob"));
}

#[test]
fn gen_data_writes_rasters_and_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "--out",
        dir.path().to_str().unwrap(),
        "gen-data",
        "--n",
        "3",
        "--style",
        "synthetic",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(dir.path().join("synthetic_00000.pgm").exists());
    assert!(dir.path().join("synthetic_00002.f64").exists());
    let csv = std::fs::read_to_string(dir.path().join("dataset.csv")).unwrap();
    assert!(csv.starts_with("index,style,shape,pose,prompt"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn full_cli_pipeline_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap().to_string();
    let cfg = write_tiny_config(dir.path());
    let common = ["--config", cfg.as_str(), "--out", out_dir.as_str()];

    for args in [
        vec!["train-base"],
        vec!["train-control", "--kind", "pose"],
        vec!["train-control", "--kind", "attr"],
    ] {
        let mut all: Vec<&str> = common.to_vec();
        all.extend(args.iter());
        let out = run(&all);
        assert_eq!(out.status.code(), Some(0), "{:?}: {}", args, stderr(&out));
    }
    assert!(dir.path().join("base.ckpt").exists());
    assert!(dir.path().join("pose.ckpt").exists());
    assert!(dir.path().join("attribute.ckpt").exists());
    assert!(dir.path().join("loss_base.csv").exists());

    // Default-scale sampling writes a raster and a guidance trace.
    let mut all: Vec<&str> = common.to_vec();
    all.extend(["sample", "--variant", "full", "--w1", "7.5", "--w2", "7.5"]);
    let out = run(&all);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(dir.path().join("sample.pgm").exists());
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("t,norm_g1,norm_g2,cosine"));
    assert_eq!(trace.lines().count(), 1 + 3);

    // eval-body and report run off the same output directory.
    let mut all: Vec<&str> = common.to_vec();
    all.extend(["eval-body", "--n", "5"]);
    let out = run(&all);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    let mut all: Vec<&str> = common.to_vec();
    all.push("report");
    let out = run(&all);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(report.lines().count() > 1);
    assert!(report.contains("body.csv"));
}

#[test]
fn sample_is_reproducible_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap().to_string();
    let cfg = write_tiny_config(dir.path());
    let common = ["--config", cfg.as_str(), "--out", out_dir.as_str()];
    for args in [
        vec!["train-base"],
        vec!["train-control", "--kind", "pose"],
        vec!["train-control", "--kind", "attr"],
    ] {
        let mut all: Vec<&str> = common.to_vec();
        all.extend(args.iter());
        assert_eq!(run(&all).status.code(), Some(0));
    }
    let mut all: Vec<&str> = common.to_vec();
    all.extend(["sample", "--shape", "1.5"]);
    assert_eq!(run(&all).status.code(), Some(0));
    let first = std::fs::read(dir.path().join("sample.f64")).unwrap();
    let first_trace = std::fs::read(dir.path().join("trace.csv")).unwrap();
    assert_eq!(run(&all).status.code(), Some(0));
    assert_eq!(first, std::fs::read(dir.path().join("sample.f64")).unwrap());
    assert_eq!(
        first_trace,
        std::fs::read(dir.path().join("trace.csv")).unwrap()
    );
}

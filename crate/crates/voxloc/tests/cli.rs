//! End-to-end CLI tests: exit codes, file outputs, and cross-command
//! consistency, all through the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_voxloc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn voxloc")
}

fn assert_code(out: &Output, want: i32, ctx: &str) {
    let code = out.status.code().expect("exit code");
    assert_eq!(
        code,
        want,
        "{ctx}: expected exit {want}, got {code}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small, fast dataset: 24^3 volumes, 2 train + 1 test.
fn gen_small(dir: &Path) {
    let out = run(&[
        "gen-phantoms",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "5",
        "--set",
        "phantom.dims=24",
        "--set",
        "phantom.n_train=2",
        "--set",
        "phantom.n_test=1",
    ]);
    assert_code(&out, 0, "gen_small");
}

const FAST_TRAIN: &[&str] = &[
    "--set", "env.crop_edge=4",
    "--set", "net.hidden=12",
    "--set", "train.epochs=1",
    "--set", "train.anneal_epochs=1",
    "--set", "train.batch_size=8",
    "--set", "train.warmup=8",
    "--set", "train.replay_capacity=64",
    "--set", "env.max_steps_train=20",
    "--set", "env.max_steps_eval=30",
];

fn train_small(data: &Path, out_dir: &Path) -> Output {
    let manifest = data.join("train_manifest.txt");
    let mut args = vec![
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "5",
    ];
    args.extend_from_slice(FAST_TRAIN);
    let out = bin().args(&args).output().expect("spawn");
    assert_code(&out, 0, "train_small");
    out
}

#[test]
fn gen_phantoms_writes_the_documented_file_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-phantoms",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "phantom.dims=24",
    ]);
    assert_code(&out, 0, "gen default split");
    // Default split is 16 train + 8 test.
    let count = |sub: &str, ext: &str| {
        std::fs::read_dir(dir.path().join(sub))
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().to_string_lossy().ends_with(ext)
            })
            .count()
    };
    assert_eq!(count("train", ".vol1"), 16);
    assert_eq!(count("train", ".truth.txt"), 16);
    assert_eq!(count("test", ".vol1"), 8);
    assert_eq!(count("test", ".truth.txt"), 8);
    assert!(dir.path().join("train_manifest.txt").exists());
    assert!(dir.path().join("test_manifest.txt").exists());
    let text = stdout(&out);
    assert!(text.contains("train dataset sha256:"));
    assert!(text.contains("test dataset sha256:"));
}

#[test]
fn gen_phantoms_hashes_reproduce() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |dir: &Path| {
        vec![
            "gen-phantoms".to_string(),
            "--out".into(),
            dir.to_str().unwrap().into(),
            "--seed".into(),
            "77".into(),
            "--set".into(),
            "phantom.dims=24".into(),
            "--set".into(),
            "phantom.n_train=2".into(),
            "--set".into(),
            "phantom.n_test=1".into(),
        ]
    };
    let oa = bin().args(args(a.path())).output().unwrap();
    let ob = bin().args(args(b.path())).output().unwrap();
    assert_code(&oa, 0, "gen a");
    let hashes = |s: &str| -> Vec<String> {
        s.lines().filter(|l| l.contains("sha256:")).map(|l| l.split(':').last().unwrap().trim().to_string()).collect()
    };
    assert_eq!(hashes(&stdout(&oa)), hashes(&stdout(&ob)));
}

#[test]
fn every_command_prints_the_effective_config_first() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "gen-phantoms",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "phantom.dims=24",
        "--set",
        "phantom.n_train=1",
        "--set",
        "phantom.n_test=1",
        "--set",
        "env.alpha=0.2",
    ]);
    assert_code(&out, 0, "gen");
    let text = stdout(&out);
    let header_end = text.find("---").expect("config delimiter");
    let header = &text[..header_end];
    assert!(header.starts_with("env.alpha = 0.2\n"), "sorted keys start with env.alpha");
    assert!(header.contains("phantom.dims = 24,24,24"));
    assert!(header.contains("seed = 0"));
}

#[test]
fn train_writes_checkpoint_and_log_deterministically() {
    let data = tempfile::tempdir().unwrap();
    gen_small(data.path());
    let run1 = tempfile::tempdir().unwrap();
    let run2 = tempfile::tempdir().unwrap();
    let o1 = train_small(data.path(), run1.path());
    train_small(data.path(), run2.path());

    let ckpt = run1.path().join("checkpoint.qnt1");
    assert!(ckpt.exists());
    assert!(stdout(&o1).contains("mean final IoU"));
    // Checkpoint reloads and drives eval.
    let log1 = std::fs::read(run1.path().join("train_log.csv")).unwrap();
    let log2 = std::fs::read(run2.path().join("train_log.csv")).unwrap();
    assert_eq!(log1, log2, "seeded training logs differ");
    let c1 = std::fs::read(&ckpt).unwrap();
    let c2 = std::fs::read(run2.path().join("checkpoint.qnt1")).unwrap();
    assert_eq!(c1, c2, "seeded checkpoints differ");

    let test_manifest = data.path().join("test_manifest.txt");
    let mut args = vec![
        "eval",
        "--manifest",
        test_manifest.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        run1.path().to_str().unwrap(),
        "--seed",
        "5",
    ];
    args.extend_from_slice(FAST_TRAIN);
    let eval_out = bin().args(&args).output().unwrap();
    assert_code(&eval_out, 0, "eval");
    let report = std::fs::read_to_string(run1.path().join("report.csv")).unwrap();
    assert!(report.starts_with("volume,termination,steps,iou,wall_mm,centroid_mm\n"));
    assert_eq!(report.lines().count(), 2, "one test volume plus header");
}

#[test]
fn oracle_eval_reports_perfect_metrics() {
    let data = tempfile::tempdir().unwrap();
    gen_small(data.path());
    let out_dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--manifest",
        data.path().join("test_manifest.txt").to_str().unwrap(),
        "--oracle",
        "--out",
        out_dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 0, "oracle eval");
    let text = stdout(&out);
    assert!(text.contains("IoU"), "{text}");
    let report = std::fs::read_to_string(out_dir.path().join("report.csv")).unwrap();
    let row = report.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    assert_eq!(fields[3], "1.000000", "oracle IoU");
    assert_eq!(fields[4], "0.000000", "oracle wall distance");
    assert_eq!(fields[5], "0.000000", "oracle centroid distance");
}

#[test]
fn rollout_trace_is_consistent_with_printed_iou() {
    let data = tempfile::tempdir().unwrap();
    gen_small(data.path());
    let run_dir = tempfile::tempdir().unwrap();
    train_small(data.path(), run_dir.path());
    let trace_path = run_dir.path().join("trace.csv");
    // No --truth: the sidecar path is derived from the volume path.
    let vol_path = data.path().join("test/vol_000.vol1");
    let ckpt_path = run_dir.path().join("checkpoint.qnt1");
    let mut args = vec![
        "rollout",
        "--volume",
        vol_path.to_str().unwrap(),
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--trace",
        trace_path.to_str().unwrap(),
        "--seed",
        "5",
    ];
    args.extend_from_slice(FAST_TRAIN);
    let out = bin().args(&args).output().unwrap();
    assert_code(&out, 0, "rollout");
    let text = stdout(&out);
    assert!(text.contains("termination:"));

    let trace = std::fs::read_to_string(&trace_path).unwrap();
    // Data rows + final line, bounded by the eval budget.
    let rows = trace.lines().count() - 1;
    assert!(rows <= 30 + 1, "trace rows {rows}");
    let final_line = trace.lines().last().unwrap();
    assert!(final_line.starts_with("end,"));
    let trace_iou: f64 = final_line.split(',').last().unwrap().parse().unwrap();
    let printed: f64 = text
        .lines()
        .find(|l| l.starts_with("IoU:"))
        .unwrap()
        .split_whitespace()
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!((printed - trace_iou).abs() < 1e-6, "printed {printed} vs trace {trace_iou}");
}

#[test]
fn exit_codes_are_stable() {
    let data = tempfile::tempdir().unwrap();
    gen_small(data.path());
    let run_dir = tempfile::tempdir().unwrap();
    train_small(data.path(), run_dir.path());
    let manifest = data.path().join("test_manifest.txt");
    let ckpt = run_dir.path().join("checkpoint.qnt1");

    // 3: missing manifest.
    let out = run(&["train", "--manifest", "/nonexistent/m.txt", "--out", "/tmp/x"]);
    assert_code(&out, 3, "missing manifest");

    // 2: unknown organ id in the data.
    let train_manifest = data.path().join("train_manifest.txt");
    let mut args = vec![
        "train",
        "--manifest",
        train_manifest.to_str().unwrap(),
        "--out",
        run_dir.path().to_str().unwrap(),
        "--organ",
        "9",
    ];
    args.extend_from_slice(FAST_TRAIN);
    let out = bin().args(&args).output().unwrap();
    assert_code(&out, 2, "unknown organ");

    // 2: config file with an unknown key, message names the line.
    let cfg_path = run_dir.path().join("bad.cfg");
    std::fs::write(&cfg_path, "phantom.scent = lavender\n").unwrap();
    let out = run(&[
        "gen-phantoms",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        run_dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 2, "unknown config key");
    assert!(String::from_utf8_lossy(&out.stderr).contains("phantom.scent"));

    // 2: invalid value names the key.
    std::fs::write(&cfg_path, "phantom.organ_count = -1\n").unwrap();
    let out = run(&[
        "gen-phantoms",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        run_dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 2, "negative organ_count");
    assert!(String::from_utf8_lossy(&out.stderr).contains("organ_count"));

    // 2: malformed --set.
    let out = run(&["gen-phantoms", "--out", "/tmp/x", "--set", "env.alpha"]);
    assert_code(&out, 2, "malformed --set");

    // 5: checkpoint trained for a different crop edge.
    let out = run(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        run_dir.path().to_str().unwrap(),
        "--set",
        "env.crop_edge=6",
    ]);
    assert_code(&out, 5, "crop-edge mismatch");

    // 5: corrupt checkpoint bytes.
    let bad_ckpt = run_dir.path().join("bad.qnt1");
    std::fs::write(&bad_ckpt, b"QNT9garbage").unwrap();
    let mut args = vec![
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        bad_ckpt.to_str().unwrap(),
        "--out",
        run_dir.path().to_str().unwrap(),
    ];
    args.extend_from_slice(FAST_TRAIN);
    let out = bin().args(&args).output().unwrap();
    assert_code(&out, 5, "corrupt checkpoint");

    // 3: missing checkpoint file.
    let vol_path = data.path().join("test/vol_000.vol1");
    let out = run(&[
        "rollout",
        "--volume",
        vol_path.to_str().unwrap(),
        "--checkpoint",
        "/nonexistent/c.qnt1",
        "--trace",
        "/tmp/t.csv",
    ]);
    assert_code(&out, 3, "missing checkpoint");
}

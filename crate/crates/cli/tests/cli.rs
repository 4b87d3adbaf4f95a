//! End-to-end runs of the taillight binary: exit codes, artifact layout,
//! determinism of gen-data and infer, and the per-layer ablation harness.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_taillight");

const TINY_CFG: &str = "\
model.input_side = 16
model.stage_channels = 4,8
model.split_l = 1
model.feature_dim = 16
model.hidden = 24
model.attn_hidden = 8
model.window = 8
train.batch_size = 4
train.lr = 0.02
train.epochs = 1,1,1
train.stride = 8
train.seed = 0
gen.train_per_class = 2
gen.test_per_class = 1
gen.frames_per_sequence = 16
";

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary spawns")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct TinyWorld {
    _dir: tempfile::TempDir,
    cfg: PathBuf,
    data: PathBuf,
    run_dir: PathBuf,
}

fn tiny_world() -> TinyWorld {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY_CFG).unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let out = run(&[
        "gen-data",
        "--out",
        path_str(&data),
        "--config",
        path_str(&cfg),
        "--seed",
        "7",
    ]);
    assert_eq!(code(&out), 0, "gen-data: {}", String::from_utf8_lossy(&out.stderr));
    TinyWorld { _dir: dir, cfg, data, run_dir }
}

fn train_args<'a>(w: &'a TinyWorld, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "train",
        "--dataset",
        path_str(&w.data),
        "--out",
        path_str(&w.run_dir),
        "--config",
        path_str(&w.cfg),
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let out = run(&["eval", "--dataset", "/nonexistent", "--out", "/tmp"]);
    assert_eq!(code(&out), 1);
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("--checkpoint"), "stderr: {msg}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["gradcheck", "--frobnicate"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn train_stage_two_without_a_prior_checkpoint_is_a_data_error() {
    let w = tiny_world();
    let out = run(&train_args(&w, &["--stage", "2"]));
    assert_eq!(code(&out), 2, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_exits_clean() {
    let out = run(&["gradcheck"]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.contains("ok")), "stdout: {text}");
}

#[test]
fn gen_data_is_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY_CFG).unwrap();
    let mut digests: Vec<Vec<(String, Vec<u8>)>> = Vec::new();
    for name in ["a", "b"] {
        let root = dir.path().join(name);
        let out = run(&[
            "gen-data",
            "--out",
            path_str(&root),
            "--config",
            path_str(&cfg),
            "--seed",
            "42",
        ]);
        assert_eq!(code(&out), 0);
        let mut files: Vec<(String, Vec<u8>)> = walk(&root)
            .into_iter()
            .map(|p| {
                let rel = p.strip_prefix(&root).unwrap().to_string_lossy().into_owned();
                (rel, fs::read(&p).unwrap())
            })
            .collect();
        files.sort_by(|a, b| a.0.cmp(&b.0));
        digests.push(files);
    }
    assert_eq!(digests[0].len(), digests[1].len());
    for (a, b) in digests[0].iter().zip(digests[1].iter()) {
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1, "file {} differs between reruns", a.0);
    }
}

fn walk(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out
}

#[test]
fn full_pipeline_produces_all_artifacts() {
    let w = tiny_world();
    let out = run(&train_args(&w, &[]));
    assert_eq!(code(&out), 0, "train: {}", String::from_utf8_lossy(&out.stderr));
    for stage in 1..=3 {
        assert!(w.run_dir.join(format!("stage{stage}.ckpt")).exists());
    }
    let metrics = fs::read_to_string(w.run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("stage,epoch,split,loss,accuracy"));
    // 3 stages x 1 epoch x (train + test) rows.
    assert_eq!(metrics.lines().count(), 1 + 6);

    let ckpt = w.run_dir.join("stage3.ckpt");
    let report_dir = w.run_dir.join("report");
    let out = run(&[
        "eval",
        "--dataset",
        path_str(&w.data),
        "--checkpoint",
        path_str(&ckpt),
        "--out",
        path_str(&report_dir),
    ]);
    assert_eq!(code(&out), 0, "eval: {}", String::from_utf8_lossy(&out.stderr));
    for f in ["chunk_report.csv", "video_report.csv"] {
        let text = fs::read_to_string(report_dir.join(f)).unwrap();
        assert!(text.starts_with("class,OOO,"), "{f}: {text}");
        assert_eq!(text.lines().count(), 10, "{f} has 8 class rows + Total");
    }

    let infer1 = run(&[
        "infer",
        "--dataset",
        path_str(&w.data),
        "--checkpoint",
        path_str(&ckpt),
    ]);
    assert_eq!(code(&infer1), 0);
    let infer2 = run(&[
        "infer",
        "--dataset",
        path_str(&w.data),
        "--checkpoint",
        path_str(&ckpt),
    ]);
    assert_eq!(infer1.stdout, infer2.stdout, "infer must be deterministic");
    let text = String::from_utf8_lossy(&infer1.stdout);
    assert!(text.contains("sequence,label,predicted,chunks"));

    let attn_dir = w.run_dir.join("attn");
    let out = run(&[
        "export-attn",
        "--dataset",
        path_str(&w.data),
        "--checkpoint",
        path_str(&ckpt),
        "--out",
        path_str(&attn_dir),
        "--count",
        "2",
    ]);
    assert_eq!(code(&out), 0, "export-attn: {}", String::from_utf8_lossy(&out.stderr));
    assert!(attn_dir.join("index.csv").exists());
    assert!(attn_dir.join("chunk000_alpha00.pgm").exists());
    assert!(attn_dir.join("chunk001_beta.csv").exists());
}

/// One accuracy row per valid split point, written the way a sweep script
/// would consume it.
#[test]
fn layer_ablation_harness_writes_one_row_per_split() {
    let w = tiny_world();
    let mut rows = vec!["split_l,chunk_accuracy,video_accuracy".to_string()];
    for split_l in 1..=2usize {
        let run_dir = w.run_dir.join(format!("l{split_l}"));
        let run_dir_s = run_dir.to_str().unwrap().to_string();
        let split_s = split_l.to_string();
        let mut args = train_args(&w, &[]);
        args[4] = &run_dir_s;
        args.extend_from_slice(&["--split-l", &split_s]);
        let out = run(&args);
        assert_eq!(code(&out), 0, "train l{split_l}: {}", String::from_utf8_lossy(&out.stderr));
        let report_dir = run_dir.join("report");
        let out = run(&[
            "eval",
            "--dataset",
            path_str(&w.data),
            "--checkpoint",
            path_str(&run_dir.join("stage3.ckpt")),
            "--out",
            path_str(&report_dir),
        ]);
        assert_eq!(code(&out), 0);
        let chunk = total_accuracy(&report_dir.join("chunk_report.csv"));
        let video = total_accuracy(&report_dir.join("video_report.csv"));
        rows.push(format!("{split_l},{chunk},{video}"));
    }
    let csv_path = w.run_dir.join("layer_ablation.csv");
    fs::write(&csv_path, rows.join("\n") + "\n").unwrap();

    let text = fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "header + one row per valid split_l");
    for (i, line) in lines.iter().enumerate().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[0], i.to_string());
        for cell in &cells[1..] {
            let v: f64 = cell.parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

fn total_accuracy(report: &Path) -> f64 {
    let text = fs::read_to_string(report).unwrap();
    let last = text.lines().last().expect("Total row");
    assert!(last.starts_with("Total,"), "report ends with {last}");
    last.rsplit(',').next().unwrap().parse().expect("accuracy cell")
}

use std::path::Path;

use cluenet::cli::{run, MANIFEST_FILE};

fn manifest(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join(MANIFEST_FILE))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn gradcheck_toy_passes() {
    assert_eq!(run(["cluenet", "gradcheck", "--preset", "micro-toy", "--coords", "8"]), 0);
}

#[test]
fn inspect_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(run(["cluenet", "inspect", "--preset", "micro", "--out", out]), 0);
    let text = std::fs::read_to_string(dir.path().join("inspect.txt")).unwrap();
    let count: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("parameters = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((2_570_000..=3_470_000).contains(&count), "{count}");
    assert_eq!(manifest(dir.path()).len(), 1);
}

#[test]
fn exit_codes() {
    assert_eq!(run(["cluenet", "train", "--unknown-flag"]), 1);
    assert_eq!(run(["cluenet", "inspect", "--set", "stage1.depth=0"]), 2);
    assert_eq!(run(["cluenet", "eval", "--checkpoint", "/nonexistent/ck.clue"]), 3);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.clue");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    assert_eq!(run(["cluenet", "eval", "--checkpoint", bad.to_str().unwrap()]), 3);
}

#[test]
fn train_eval_visualize_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    let common = ["--preset", "micro-toy", "--set", "synth_train=24", "--set", "synth_val=8", "--set", "batch_size=8"];
    let mut args = vec!["cluenet", "train", "--out", o, "--set", "epochs=2"];
    args.extend(common);
    assert_eq!(run(args.clone()), 0);
    let ck = out.join("checkpoint.clue");
    assert!(ck.exists());
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let mut resume = vec!["cluenet", "train", "--out", o, "--set", "epochs=3", "--resume"];
    resume.extend(common);
    assert_eq!(run(resume), 0);
    assert_eq!(std::fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 4);

    let mut eval = vec!["cluenet", "eval", "--checkpoint", ck.to_str().unwrap()];
    eval.extend(common);
    assert_eq!(run(eval), 0);

    let vis = dir.path().join("vis");
    let mut v = vec![
        "cluenet", "visualize", "--checkpoint", ck.to_str().unwrap(), "--out", vis.to_str().unwrap(),
        "--stage", "2", "--head", "1", "--merge-k", "2", "--alpha", "0.7", "--images", "2",
    ];
    v.extend(common);
    assert_eq!(run(v), 0);
    let files = manifest(&vis);
    assert_eq!(files.len(), 6);
    assert!(files.iter().all(|f| Path::new(f).exists()));
    let ppm = std::fs::read(vis.join("image0_stage2_head1.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
    // Out-of-range stage is an argument error.
    let mut bad = vec!["cluenet", "visualize", "--out", vis.to_str().unwrap(), "--stage", "9"];
    bad.extend(common);
    assert_eq!(run(bad), 1);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    assert_eq!(run(["cluenet", "bench", "--dim", "8", "--dim-prime", "8", "--height", "16", "--sizes", "3", "--out", o]), 0);
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

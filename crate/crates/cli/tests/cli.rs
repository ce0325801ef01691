//! End-to-end command tests driving the compiled binary.

use std::path::Path;
use std::process::{Command, Output};

fn vnp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vnp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_prompts(dir: &Path, n: usize) -> std::path::PathBuf {
    let path = dir.join("prompts.txt");
    let text: String = (0..n)
        .map(|i| format!("scene number {i} with drifting clouds\n"))
        .collect();
    std::fs::write(&path, text).unwrap();
    path
}

fn gen_small_dataset(dir: &Path, n: usize) -> std::path::PathBuf {
    let prompts = write_prompts(dir, n);
    let out = dir.join("data.pnd");
    let res = vnp(&[
        "gen-data",
        "--prompts",
        prompts.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--dims",
        "4x8x16x16",
        "--iters",
        "2",
        "--seed",
        "7",
    ]);
    assert!(res.status.success(), "gen-data failed: {}", stderr(&res));
    out
}

#[test]
fn gen_data_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = write_prompts(dir.path(), 3);
    let out = dir.path().join("d.pnd");
    let res = vnp(&[
        "gen-data",
        "--prompts",
        prompts.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--dims",
        "4x8x16x16",
        "--iters",
        "5",
        "--seed",
        "7",
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let text = stdout(&res);
    assert!(text.contains("config:"), "config echo missing: {text}");
    assert!(text.contains("wrote 3 records"));
    assert!(text.contains("mean delta temporal correlation"));
    assert!(out.is_file());
}

#[test]
fn gen_data_missing_prompts_exits_2() {
    let res = vnp(&[
        "gen-data",
        "--prompts",
        "/nonexistent/prompts.txt",
        "--out",
        "/tmp/never.pnd",
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("/nonexistent/prompts.txt"));
}

#[test]
fn gen_data_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = write_prompts(dir.path(), 2);
    let a = dir.path().join("a.pnd");
    let b = dir.path().join("b.pnd");
    for out in [&a, &b] {
        let res = vnp(&[
            "gen-data",
            "--prompts",
            prompts.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--dims",
            "2x4x8x8",
            "--iters",
            "1",
            "--d0",
            "100",
            "--seed",
            "3",
        ]);
        assert!(res.status.success(), "{}", stderr(&res));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn train_refine_bench_eval_chain() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small_dataset(dir.path(), 6);
    let model = dir.path().join("model.vnp");
    let csv = dir.path().join("loss.csv");
    let res = vnp(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--steps",
        "6",
        "--batch",
        "2",
        "--holdout",
        "2",
        "--loss-csv",
        csv.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    assert!(res.status.success(), "train failed: {}", stderr(&res));
    let text = stdout(&res);
    assert!(text.contains("parameters:"));
    assert!(text.contains("held-out model mse"));
    assert!(model.is_file());
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("step,lr,loss"));
    assert_eq!(csv_text.lines().count(), 7);

    // Refine twice with the same seed: byte-identical outputs.
    let za = dir.path().join("a.lat");
    let zb = dir.path().join("b.lat");
    for out in [&za, &zb] {
        let res = vnp(&[
            "refine",
            "--checkpoint",
            model.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "7",
        ]);
        assert!(res.status.success(), "refine failed: {}", stderr(&res));
        assert!(stdout(&res).contains("temporal correlation"));
    }
    assert_eq!(std::fs::read(&za).unwrap(), std::fs::read(&zb).unwrap());

    // Bench with a single trial flags instability.
    let res = vnp(&[
        "bench",
        "--checkpoint",
        model.to_str().unwrap(),
        "--iters",
        "1",
        "--trials",
        "1",
    ]);
    assert!(res.status.success(), "bench failed: {}", stderr(&res));
    let text = stdout(&res);
    assert!(text.contains("speedup ratio"));
    assert!(text.contains("unstable"));

    // Eval: stats plus a one-variant table.
    let res = vnp(&[
        "eval",
        "--data",
        data.to_str().unwrap(),
        "--checkpoint",
        model.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "eval failed: {}", stderr(&res));
    let text = stdout(&res);
    assert!(text.contains("records: 6"));
    assert!(text.contains("identity baseline mse"));
    assert!(text.contains("tucker"));
}

#[test]
fn train_paper_preset_prints_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = write_prompts(dir.path(), 1);
    let data = dir.path().join("d.pnd");
    let res = vnp(&[
        "gen-data",
        "--prompts",
        prompts.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--dims",
        "4x16x64x64",
        "--iters",
        "1",
        "--seed",
        "1",
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    // Zero steps: prints the preset and writes an untrained checkpoint.
    let model = dir.path().join("paper.vnp");
    let res = vnp(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--preset",
        "paper",
        "--steps",
        "0",
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let text = stdout(&res);
    assert!(text.contains("[5, 8, 20, 7]"), "{text}");
    assert!(text.contains("[64, 128, 320, 512]"), "{text}");
}

#[test]
fn train_corrupt_dataset_exits_1_with_record() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small_dataset(dir.path(), 3);
    let mut bytes = std::fs::read(&data).unwrap();
    let len = bytes.len();
    bytes[len - 10] ^= 0xff;
    std::fs::write(&data, &bytes).unwrap();
    let res = vnp(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.path().join("m.vnp").to_str().unwrap(),
        "--steps",
        "1",
    ]);
    assert_eq!(res.status.code(), Some(1));
    let err = stderr(&res);
    assert!(err.contains("record 2"), "{err}");
}

#[test]
fn config_file_merging_and_unknown_key() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = write_prompts(dir.path(), 2);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "dims=2x4x8x8\niters=1\nseed=9\n").unwrap();
    let out = dir.path().join("d.pnd");
    // File seed 9 overridden by the explicit flag.
    let res = vnp(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--prompts",
        prompts.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    let text = stdout(&res);
    assert!(text.contains("seed=4"), "flag must override file: {text}");
    assert!(text.contains("dims=2x4x8x8"), "{text}");

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "not_a_real_key=1\n").unwrap();
    let res = vnp(&[
        "gen-data",
        "--config",
        bad.to_str().unwrap(),
        "--prompts",
        prompts.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(stderr(&res).contains("not_a_real_key"), "{}", stderr(&res));
}

#[test]
fn eval_empty_dataset_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let prompts = write_prompts(dir.path(), 1);
    // Build an empty dataset by writing zero records through the library.
    let data = dir.path().join("empty.pnd");
    let header = vnp_core::pndata::DatasetHeader::new(
        0,
        vnp_core::tensor::Dims4::new(2, 4, 8, 8),
        16,
    );
    vnp_core::pndata::write_dataset::<f32>(&data, &header, &[]).unwrap();
    let res = vnp(&["eval", "--data", data.to_str().unwrap()]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(stdout(&res).contains("records: 0"));
    let _ = prompts;
}

#[test]
fn refine_loop_collapse_config() {
    // Degenerate generation config: one round, almost-pass-through mask.
    let dir = tempfile::tempdir().unwrap();
    let prompts = write_prompts(dir.path(), 2);
    let out = dir.path().join("d.pnd");
    let res = vnp(&[
        "gen-data",
        "--prompts",
        prompts.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--dims",
        "2x4x8x8",
        "--iters",
        "1",
        "--d0",
        "100",
        "--seed",
        "2",
    ]);
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(out.is_file());
}

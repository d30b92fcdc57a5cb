use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dds_core::synthdata;
use dds_core::trainer::{read_jsonl, EvalMode};

fn dds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dds"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const NET: [&str; 6] = [
    "--selector-channels",
    "2",
    "--reconstructor-channels",
    "2",
    "--latent-dim",
    "4",
];

fn small_dataset(dir: &Path) -> PathBuf {
    let path = dir.join("ds.ddsd");
    let out = dds(&[
        "gen",
        "--size",
        "8",
        "--signal",
        "6",
        "--n-train",
        "32",
        "--n-test",
        "8",
        "--seed",
        "3",
        "--out",
        s(&path),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

fn train_small(data: &Path, out_dir: &Path, mode: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(out_dir),
        "--mode",
        mode,
        "--batch-size",
        "8",
        "--seed",
        "4",
    ];
    for (flag, default) in [("--m", "6"), ("--epochs", "2")] {
        if !extra.contains(&flag) {
            args.extend([flag, default]);
        }
    }
    args.extend(NET);
    args.extend(extra);
    dds(&args)
}

#[test]
fn gen_is_reproducible_and_reports_shape() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ddsd"), dir.path().join("b.ddsd"));
    for p in [&a, &b] {
        let out = dds(&[
            "gen",
            "--size",
            "16",
            "--signal",
            "24",
            "--seed",
            "7",
            "--out",
            s(p),
        ]);
        assert_eq!(code(&out), 0);
        assert!(stdout(&out).contains("N=320"), "{}", stdout(&out));
        assert!(stdout(&out).contains("F=256"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let ds = synthdata::load(&a).unwrap();
    assert_eq!((ds.len(), ds.features(), ds.signal_pixels), (320, 256, 24));
}

#[test]
fn gen_rejects_oversized_pattern() {
    let dir = tempfile::tempdir().unwrap();
    let out = dds(&[
        "gen",
        "--signal",
        "999",
        "--size",
        "8",
        "--out",
        s(&dir.path().join("x.ddsd")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("pattern larger than image"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn gen_writes_pgm_previews() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("pgm");
    let out = dds(&[
        "gen",
        "--size",
        "8",
        "--signal",
        "6",
        "--out",
        s(&dir.path().join("x.ddsd")),
        "--pgm",
        s(&pgm),
        "--pgm-count",
        "2",
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read_dir(&pgm).unwrap().count(), 4);
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    for sub in ["gen", "train", "eval", "ablate", "gradcheck", "mask"] {
        assert_eq!(code(&dds(&[sub, "--no-such-flag"])), 2, "{sub}");
        let help = dds(&[sub, "--help"]);
        assert_eq!(code(&help), 0, "{sub}");
        assert!(stdout(&help).contains("Usage: dds"), "{sub}");
    }
    assert_eq!(code(&dds(&[])), 2);
    assert_eq!(code(&dds(&["frobnicate"])), 2);
    assert_eq!(
        code(&dds(&[
            "train", "--data", "x", "--out", "y", "--mode", "dds_plus"
        ])),
        2
    );
    assert!(!stdout(&dds(&["gradcheck", "--help"])).contains("corrupt"));
}

#[test]
fn gradcheck_passes_and_corruption_fails() {
    let ok = dds(&["gradcheck", "--seed", "3"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("max relative error"));
    assert!(stdout(&ok).contains("masked-input gradient violations 0"));
    let bad = dds(&["gradcheck", "--corrupt", "matmul"]);
    assert_eq!(code(&bad), 1, "{}", stdout(&bad));
    assert_eq!(code(&dds(&["gradcheck", "--corrupt", "nope"])), 2);
}

#[test]
fn train_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = train_small(&data, d, "dds", &[]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(stdout(&out).contains("beta = 0.6666666666666666"));
        assert!(stdout(&out).contains("kappa = 0.1"));
    }
    for f in [
        "config.toml",
        "metrics.jsonl",
        "metrics.csv",
        "timings.csv",
        "model.dds1",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    let read = |d: &Path| std::fs::read(d.join("metrics.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
    let config = std::fs::read_to_string(a.join("config.toml")).unwrap();
    for key in ["beta", "zeta", "gamma", "delta", "kappa", "epsilon"] {
        assert!(config.contains(&format!("{key} = ")), "{key}");
    }
}

#[test]
fn naive_and_gated_runs_give_comparable_records() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let (a, b) = (dir.path().join("dds"), dir.path().join("naive"));
    assert_eq!(code(&train_small(&data, &a, "dds", &[])), 0);
    assert_eq!(code(&train_small(&data, &b, "naive_ae", &[])), 0);
    let ra = read_jsonl(a.join("metrics.jsonl")).unwrap();
    let rb = read_jsonl(b.join("metrics.jsonl")).unwrap();
    assert_eq!(ra.len(), rb.len());
    for (x, y) in ra.iter().zip(&rb) {
        assert_eq!((x.epoch, x.split, x.m), (y.epoch, y.split, y.m));
        assert_eq!(
            (x.eval_mode, y.eval_mode),
            (EvalMode::Dds, EvalMode::NaiveAe)
        );
        assert!(x.mse.is_finite() && y.mse.is_finite());
    }
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "epochs = 1\nseed = 9\n\n[gate]\nm = 5\nkappa = 0.2\n").unwrap();
    let out_dir = dir.path().join("run");
    let mut args = vec![
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out_dir),
        "--config",
        s(&cfg),
        "--epochs",
        "2",
    ];
    args.extend(NET);
    let out = dds(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let echoed = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(echoed.contains("epochs = 2"));
    assert!(echoed.contains("seed = 9"));
    assert!(echoed.contains("m = 5"));
    assert!(echoed.contains("kappa = 0.2"));

    std::fs::write(&cfg, "epoch = 1\n").unwrap();
    let out = dds(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out_dir),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epoch"), "{}", stderr(&out));
    std::fs::write(&cfg, "[gate]\nkapa = 1.0\n").unwrap();
    assert_eq!(
        code(&dds(&[
            "train",
            "--data",
            s(&data),
            "--out",
            s(&out_dir),
            "--config",
            s(&cfg)
        ])),
        2
    );
}

#[test]
fn invalid_budget_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = train_small(&data, &dir.path().join("r"), "dds", &["--m", "65"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("65"), "{}", stderr(&out));
}

#[test]
fn numerical_blow_up_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = train_small(
        &data,
        &dir.path().join("r"),
        "dds",
        &["--lr", "1e300", "--epochs", "3"],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite loss"));
}

#[test]
fn eval_collapse_modes_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let run = dir.path().join("run");
    assert_eq!(code(&train_small(&data, &run, "dds", &[])), 0);
    let ckpt = run.join("model.dds1");
    let eval = |mode: &str| {
        let out = dds(&[
            "eval",
            "--data",
            s(&data),
            "--ckpt",
            s(&ckpt),
            "--mode",
            mode,
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        serde_json::from_str::<serde_json::Value>(stdout(&out).trim()).unwrap()
    };
    let ones = eval("forced_all_ones");
    assert_eq!(ones["mask_overlap"], 1.0);
    let raw = eval("dds_train_only");
    assert!(raw["mask_overlap"].is_null());
    assert_eq!(ones["mse"], raw["mse"]);
    let dds_rec = eval("dds");
    let last = read_jsonl(run.join("metrics.jsonl")).unwrap();
    let final_test = last
        .iter()
        .rev()
        .find(|r| r.split == synthdata::Split::Test)
        .unwrap();
    assert_eq!(dds_rec["mse"].as_f64().unwrap(), final_test.mse);

    let out_file = dir.path().join("eval.jsonl");
    let out = dds(&[
        "eval",
        "--data",
        s(&data),
        "--ckpt",
        s(&ckpt),
        "--mode",
        "forced_uniform_importance",
        "--out",
        s(&out_file),
    ]);
    assert_eq!(code(&out), 0);
    let recs = read_jsonl(&out_file).unwrap();
    assert_eq!(recs[0].mean_selected_score, Some(1.0));

    let naive_run = dir.path().join("naive");
    assert_eq!(code(&train_small(&data, &naive_run, "naive_ae", &[])), 0);
    let out = dds(&[
        "eval",
        "--data",
        s(&data),
        "--ckpt",
        s(&naive_run.join("model.dds1")),
        "--mode",
        "forced_all_ones",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ablate_emits_one_row_per_mode_and_budget() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out_dir = dir.path().join("ab");
    let mut args = vec![
        "ablate",
        "--data",
        s(&data),
        "--out",
        s(&out_dir),
        "--m-sweep",
        "8,16,32",
        "--modes",
        "dds,naive_ae,forced_all_ones",
        "--epochs",
        "1",
        "--batch-size",
        "16",
    ];
    args.extend(NET);
    let out = dds(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 3);
    assert!(csv.starts_with("mode,m,"));
    assert!(out_dir.join("metrics.jsonl").exists());
    assert!(out_dir.join("config.toml").exists());
    let bad = dds(&[
        "ablate",
        "--data",
        s(&data),
        "--out",
        s(&out_dir),
        "--m-sweep",
        "8,999",
    ]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn mask_exports_triplets_and_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let run = dir.path().join("run");
    assert_eq!(code(&train_small(&data, &run, "dds", &[])), 0);
    let masks = dir.path().join("masks");
    let out = dds(&[
        "mask",
        "--data",
        s(&data),
        "--ckpt",
        s(&run.join("model.dds1")),
        "--out",
        s(&masks),
        "--count",
        "4",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_dir(&masks).unwrap().count(), 12);
    let text = stdout(&out);
    let overlap: f64 = text
        .split("mean mask_overlap ")
        .nth(1)
        .and_then(|r| r.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&overlap));
    let pgm = std::fs::read_to_string(masks.join("0000_mask.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n8 8\n255\n"));
}

use std::path::Path;
use std::process::{Command, Output};

fn swvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swvr"))
        .args(args)
        .env("SWVR_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const TINY: [&str; 8] = [
    "--set",
    "data.synthetic.n_samples=24",
    "--set",
    "train.max_steps=4",
    "--set",
    "model.d_model=8",
    "--set",
    "model.d_ff=16",
];

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut args = vec!["train", "--out", out];
    args.extend(TINY);
    args.extend(extra);
    swvr(&args)
}

#[test]
fn train_eval_generate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train_into(&run, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "checkpoint.swvr", "train_log.jsonl", "vocab.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let run_s = run.to_str().unwrap();
    let o = swvr(&["eval", "--run", run_s, "--reference-as-candidate"]);
    assert_eq!(code(&o), 0);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["rouge_l_f"], 1.0);
    assert!(run.join("samples.csv").exists());

    let synth = dir.path().join("data");
    let o = swvr(&["synth", "--out", synth.to_str().unwrap(), "--set", "data.synthetic.n_samples=24"]);
    assert_eq!(code(&o), 0);
    let test_file = synth.join("test.jsonl");
    let o = swvr(&["generate", "--run", run_s, "--data", test_file.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let lines = String::from_utf8(o.stdout).unwrap();
    let expected = std::fs::read_to_string(&test_file).unwrap().lines().count();
    assert_eq!(lines.lines().count(), expected);

    // The default model needs video; a bare transcript is a data error.
    let o = swvr(&["generate", "--run", run_s, "--transcript", "k000 f001 k002"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn training_is_reproducible_to_the_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(code(&train_into(&a, &["--seed", "3"])), 0);
    assert_eq!(code(&train_into(&b, &["--seed", "3"])), 0);
    assert_eq!(code(&train_into(&c, &["--seed", "4"])), 0);
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    for f in ["checkpoint.swvr", "train_log.jsonl", "config.json"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    assert_ne!(read(&a, "checkpoint.swvr"), read(&c, "checkpoint.swvr"));

    // The written config alone reproduces the run.
    let d = dir.path().join("d");
    let cfg = a.join("config.json");
    let o = swvr(&["train", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(read(&a, "checkpoint.swvr"), read(&d, "checkpoint.swvr"));
}

#[test]
fn configuration_problems_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for extra in [
        vec!["--set", "model.variant=aux_encoder", "--set", "model.sdm_layers=[2]"],
        vec!["--set", "model.heads=3"],
        vec!["--set", "train.lr=-1"],
        vec!["--set", "nonsense"],
        vec!["--set", "model.no_such_field=1"],
    ] {
        let o = train_into(&out, &extra);
        assert_eq!(code(&o), 2, "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"model\": {\"layers\": \"two\"}}").unwrap();
    assert_eq!(code(&swvr(&["train", "--config", bad.to_str().unwrap()])), 2);
}

#[test]
fn data_problems_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    std::fs::write(&data, "{\"id\": 1}\n").unwrap();
    let set = format!("data={{\"jsonl\":{{\"path\":\"{}\"}}}}", data.display());
    let o = swvr(&["train", "--out", dir.path().join("r").to_str().unwrap(), "--set", &set]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let o = swvr(&["eval", "--run", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_gradient() {
    let o = swvr(&["gradcheck", "--set", "model.variant=swr_from_summary"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = swvr(&["gradcheck", "--corrupt", "sdm_projector"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sdm_projector"));
}

#[test]
fn ablation_plan_lists_cells() {
    let o = swvr(&["ablate", "--study", "bvla_placement", "--plan", "--set", "model.layers=6"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows[0].starts_with("none,swr_from_transcript,,"));
    assert!(rows[6].starts_with("6-6,"));
    assert_eq!(code(&swvr(&["ablate", "--study", "nope", "--plan"])), 2);
}

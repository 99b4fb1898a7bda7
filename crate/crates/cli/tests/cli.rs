use std::path::Path;
use std::process::{Command, Output};

use tacoformer::preprocess::instances::InstanceSet;
use tacoformer::preprocess::pipeline::{ChannelGroup, TrialRecord, DEAP_CHANNELS, DEAP_SAMPLES, RATE_HZ};
use tacoformer::preprocess::raw::write_subject;
use tacoformer::Tensor;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tacoformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn deap_trial(subject: u32, trial: u32) -> TrialRecord {
    let data = (0..DEAP_CHANNELS * DEAP_SAMPLES)
        .map(|i| {
            let (c, s) = (i / DEAP_SAMPLES, i % DEAP_SAMPLES);
            (0.01 * s as f64 * (1.0 + c as f64 * 0.1)).sin() + 0.1 * c as f64
        })
        .collect();
    TrialRecord {
        subject,
        trial,
        groups: vec![ChannelGroup::new(
            "signal",
            RATE_HZ,
            Tensor::new(vec![DEAP_CHANNELS, DEAP_SAMPLES], data).unwrap(),
        )],
        valence: 7.0,
        arousal: 3.0,
    }
}

const TINY: [&str; 8] = [
    "--set",
    "arch.d_model=8",
    "--set",
    "arch.heads=2",
    "--set",
    "arch.layers=1",
    "--set",
    "train.batch_size=16",
];

fn synth_file(dir: &Path, n: usize) -> std::path::PathBuf {
    let out = dir.join("synth.pstb");
    let n = n.to_string();
    let o = run(&[
        "synth", "--n", &n, "--seed", "3", "--timestamps", "8", "--pps-channels", "2", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn help_lists_subcommands_and_flags() {
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in ["preprocess", "synth", "train", "eval", "ablate", "gradcheck", "export-attn", "--threads"] {
        assert!(stdout(&o).contains(sub), "missing {sub}");
    }
    let o = run(&["train", "--help"]);
    for flag in ["--data", "--config", "--set", "--out", "--log"] {
        assert!(stdout(&o).contains(flag), "missing {flag}");
    }
}

#[test]
fn unknown_flags_and_values_exit_2() {
    assert_eq!(code(&run(&["synth", "--n", "4", "--out", "x", "--bogus"])), 2);
    let o = run(&["synth", "--n", "4", "--coupling", "bogus", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    assert_eq!(code(&run(&["frobnicate"])), 2);
}

#[test]
fn synth_writes_requested_count_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.pstb");
    let b = dir.path().join("b.pstb");
    for out in [&a, &b] {
        let o = run(&["synth", "--n", "1000", "--seed", "11", "--timestamps", "8", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("1000 instances"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(InstanceSet::load(&a).unwrap().len(), 1000);
}

#[test]
fn preprocess_deap_trial() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    std::fs::create_dir(&raw).unwrap();
    write_subject(&raw, 1, &[deap_trial(1, 1)]).unwrap();
    let out1 = dir.path().join("one.pstb");
    let out2 = dir.path().join("two.pstb");
    for out in [&out1, &out2] {
        let o = run(&["preprocess", "--dataset", "deap", "--in", p(&raw), "--task", "valence", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("60 instances"), "{}", stdout(&o));
    }
    assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out2).unwrap());
    let set = InstanceSet::load(&out1).unwrap();
    assert_eq!(set.eeg.shape(), &[60, 9, 9, 128]);
    assert_eq!(set.pps.shape(), &[60, 8, 128]);
    assert_eq!(set.positives(), 60);
}

#[test]
fn preprocess_missing_rating_names_trial() {
    let dir = tempfile::tempdir().unwrap();
    write_subject(dir.path(), 2, &[deap_trial(2, 5)]).unwrap();
    std::fs::write(dir.path().join("ratings.csv"), "subject,trial,valence,arousal\n2,4,5,5\n").unwrap();
    let o = run(&["preprocess", "--dataset", "deap", "--in", p(dir.path()), "--out", p(&dir.path().join("o.pstb"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("subject 2 trial 5"), "{}", stderr(&o));
}

#[test]
fn missing_input_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["preprocess", "--dataset", "deap", "--in", p(&dir.path().join("nope")), "--out", "o.pstb"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = run(&["eval", "--checkpoint", p(&dir.path().join("c.pstb")), "--data", "d.pstb"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn corrupt_data_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.pstb");
    std::fs::write(&bad, b"not a container").unwrap();
    let o = run(&["train", "--data", p(&bad), "--out", p(&dir.path().join("c.pstb"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn bad_config_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_file(dir.path(), 16);
    let out = dir.path().join("c.pstb");
    let o = run(&["train", "--data", p(&data), "--out", p(&out), "--set", "train.learning_rte=0.1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.learning_rte"), "{}", stderr(&o));
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"arch": {"widht": 3}}"#).unwrap();
    let o = run(&["train", "--data", p(&data), "--out", p(&out), "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_file(dir.path(), 40);
    let ckpt = dir.path().join("model.pstb");
    let log = dir.path().join("train.jsonl");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&ckpt), "--log", p(&log), "--set", "train.epochs=3"];
    args.extend(TINY);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(ckpt.exists() && dir.path().join("model.json").exists());

    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["config"]["arch"]["d_model"], 8);
    assert_eq!(lines[0]["config"]["train"]["epochs"], 3);
    assert_eq!(lines[3]["epoch"], 3);

    let m1 = dir.path().join("m1.json");
    let m2 = dir.path().join("m2.json");
    for m in [&m1, &m2] {
        let o = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(m)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = std::fs::read_to_string(&m1).unwrap();
    assert_eq!(a, std::fs::read_to_string(&m2).unwrap());
    let metrics: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(metrics["n"], 40);
    let c = &metrics["confusion"];
    let total: u64 = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| c[i][j].as_u64().unwrap()).sum();
    assert_eq!(total, 40);

    let attn = dir.path().join("attn");
    let o = run(&["export-attn", "--checkpoint", p(&ckpt), "--data", p(&data), "--index", "0", "--out", p(&attn)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let label = InstanceSet::load(&data).unwrap().labels[0];
    let mut names: Vec<String> = std::fs::read_dir(&attn)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut expected: Vec<String> = ["channel", "fused", "token"]
        .iter()
        .flat_map(|m| ["csv", "pgm"].map(|ext| format!("attn_taco_{m}_V{label}.{ext}")))
        .collect();
    expected.sort();
    assert_eq!(names, expected);

    let o = run(&["export-attn", "--checkpoint", p(&ckpt), "--data", p(&data), "--index", "40", "--out", p(&attn)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_file(dir.path(), 24);
    let mut logs = Vec::new();
    for (i, threads) in ["1", "3"].iter().enumerate() {
        let ckpt = dir.path().join(format!("c{i}.pstb"));
        let log = dir.path().join(format!("l{i}.jsonl"));
        let mut args = vec!["--threads", threads, "train", "--data", p(&data), "--out", p(&ckpt), "--log", p(&log)];
        args.extend(TINY);
        args.extend(["--set", "train.epochs=2"]);
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        logs.push((std::fs::read(&ckpt).unwrap(), std::fs::read_to_string(&log).unwrap()));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn ablate_emits_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_file(dir.path(), 24);
    let csv = dir.path().join("ablation.csv");
    let mut args = vec!["ablate", "--data", p(&data), "--out", p(&csv), "--seeds", "0", "--set", "train.epochs=1"];
    args.extend(TINY);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.iter().filter(|r| r.starts_with("fusion,")).count(), 4);
    assert_eq!(rows.iter().filter(|r| r.starts_with("posenc,")).count(), 2);
    for mode in ["concat", "tca", "cca", "taco", "2d", "1d"] {
        assert!(stdout(&o).contains(mode), "{mode} missing from table");
    }
}

#[test]
fn gradcheck_passes_and_reports_every_tensor() {
    let o = run(&["gradcheck", "--mode", "taco,concat"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("classifier.w") && out.contains("fusion."), "{out}");
    let o = run(&["gradcheck", "--mode", "tca", "--tolerance", "1e-30"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

//! End-to-end CLI behavior: exit codes, config precedence, provenance echo,
//! and the documented error messages.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_larp")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).env_remove("LARP_SEED").output().unwrap()
}

fn run_env(args: &[&str], seed: &str) -> Output {
    Command::new(bin()).args(args).env("LARP_SEED", seed).output().unwrap()
}

const TINY: &[(&str, &str)] = &[
    ("frames", "2"),
    ("height", "8"),
    ("width", "8"),
    ("embed_dim", "16"),
    ("heads", "2"),
    ("enc_depth", "1"),
    ("dec_depth", "1"),
    ("tokens", "4"),
    ("code_dim", "4"),
    ("codebook_size", "8"),
    ("prior_dim", "16"),
    ("prior_heads", "2"),
    ("prior_depth", "1"),
    ("total_steps", "8"),
    ("warmup_steps", "2"),
    ("batch_size", "2"),
    ("clips", "4"),
    ("classes", "2"),
];

fn tiny_cfg_file(dir: &Path) -> String {
    let text: String = TINY.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn no_subcommand_is_a_config_error() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "not_a_key=1\n").unwrap();
    let out = run(&["synth-data", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown key not_a_key"), "{err}");
}

#[test]
fn bad_flag_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth-data", "--tokens", "many", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "reconstruct",
        "--checkpoint",
        "/nonexistent/tok.ck",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/tok.ck"), "{err}");
}

#[test]
fn numeric_errors_map_to_exit_4() {
    assert_eq!(larp::Error::Numeric("nan".into()).exit_code(), 4);
    assert_eq!(larp::Error::Config("k".into()).exit_code(), 2);
    assert_eq!(larp::Error::Data("d".into()).exit_code(), 3);
}

#[test]
fn grad_check_passes_and_exits_zero() {
    let out = run(&["grad-check"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS matmul"), "{text}");
    assert!(text.contains("PASS full_tokenizer_prior_loss"), "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn config_echo_matches_stored_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg_file(dir.path());
    let out_dir = dir.path().join("run");
    let out = run(&["train-tokenizer", "--config", &cfg, "--out-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stored = std::fs::read_to_string(out_dir.join("config.txt")).unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(
        stdout.as_bytes().starts_with(stored.as_bytes()),
        "stdout echo must be byte-identical to the stored provenance copy"
    );
    // The same text is embedded in the checkpoint.
    let state = larp::train::TrainState::from_checkpoint_bytes(
        &std::fs::read(out_dir.join("tokenizer.ck")).unwrap(),
    )
    .unwrap();
    assert_eq!(state.provenance(), stored);
}

#[test]
fn env_seed_overrides_file_and_flags_override_env() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg_file(dir.path());
    let d1 = dir.path().join("a");
    let d2 = dir.path().join("b");
    let d3 = dir.path().join("c");
    // Same env seed twice: identical clips.
    assert!(run_env(&["synth-data", "--config", &cfg, "--out-dir", d1.to_str().unwrap()], "99").status.success());
    assert!(run_env(&["synth-data", "--config", &cfg, "--out-dir", d2.to_str().unwrap()], "99").status.success());
    let clip = "clip_00000.dt01";
    assert_eq!(std::fs::read(d1.join(clip)).unwrap(), std::fs::read(d2.join(clip)).unwrap());
    // A CLI flag wins over the env seed.
    assert!(
        run_env(&["synth-data", "--config", &cfg, "--seed", "123", "--out-dir", d3.to_str().unwrap()], "99")
            .status
            .success()
    );
    assert_ne!(std::fs::read(d1.join(clip)).unwrap(), std::fs::read(d3.join(clip)).unwrap());
}

#[test]
fn alpha_zero_ablation_runs_without_prior_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg_file(dir.path());
    let out_dir = dir.path().join("noprior");
    let out = run(&[
        "train-tokenizer",
        "--config",
        &cfg,
        "--alpha",
        "0",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    for line in metrics.lines().skip(1) {
        let nll = line.rsplit(',').next().unwrap();
        assert_eq!(nll, "0", "prior NLL column must stay zero with alpha 0: {line}");
    }
}

#[test]
fn analyze_ngrams_reproduces_hand_counted_table() {
    // Four known sequences; 2-gram counts by hand:
    //   (1,2) x4, (2,3) x2, (2,1)/(3,1)/(1,1) x1 each
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    let seqs: [&[u32]; 4] = [&[1, 2, 1], &[2, 3, 1, 2], &[1, 2, 3], &[1, 1, 2]];
    let mut manifest = String::new();
    for (i, seq) in seqs.iter().enumerate() {
        let name = format!("s{i}.ts01");
        larp::tokenizer::write_ts01_file(&corpus.join(&name), seq, 8).unwrap();
        manifest.push_str(&format!("{name}\t{}\n", i % 2));
    }
    std::fs::write(corpus.join("manifest.tsv"), manifest).unwrap();

    let out_dir = dir.path().join("out");
    let out = run(&[
        "analyze",
        "ngrams",
        "--corpus",
        corpus.to_str().unwrap(),
        "--order",
        "2",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let histogram = std::fs::read_to_string(out_dir.join("histogram.csv")).unwrap();
    // Three 2-grams occur once, one occurs twice, one occurs four times.
    assert_eq!(histogram, "bucket_lo,bucket_hi,unique_ngrams\n1,1,3\n2,2,1\n4,4,1\n");

    let dom_dir = dir.path().join("dom");
    let out = run(&[
        "analyze",
        "dominance",
        "--corpus",
        corpus.to_str().unwrap(),
        "--threshold",
        "2",
        "--out-dir",
        dom_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dominance = std::fs::read_to_string(dom_dir.join("dominance.csv")).unwrap();
    // Qualifying at threshold 2: (1,2) with 2 of 4 occurrences per class and
    // (2,3) with 1 per class; both score 0.5 with the tie going to class 0,
    // ordered by n-gram.
    assert_eq!(dominance, "rank,score,ngram,class\n0,0.5,1-2,0\n1,0.5,2-3,0\n");
}

#[test]
fn dominance_without_threshold_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "analyze",
        "dominance",
        "--corpus",
        dir.path().to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

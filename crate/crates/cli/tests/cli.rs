//! End-to-end coverage for the `posforest` binary: each subcommand is
//! exercised through a real process, including a full gen → render →
//! train → decode → eval round trip on a tiny corpus.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posforest"))
        .args(args)
        .output()
        .expect("the binary should spawn")
}

fn stdout(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).expect("stdout should be UTF-8")
}

fn stderr(output: &Output) -> String {
    String::from_utf8(output.stderr.clone()).expect("stderr should be UTF-8")
}

fn assert_ok(output: &Output) {
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        stdout(output),
        stderr(output)
    );
}

fn path_str(path: &Path) -> &str {
    path.to_str().expect("temp paths should be UTF-8")
}

#[test]
fn encode_prints_one_identifier_per_token() {
    let output = run(&["encode", "--expr", "x^{2}"]);
    assert_ok(&output);
    assert_eq!(stdout(&output), "x\tM\n^\tML\n{\tML\n2\tML\n}\tML\n");
}

#[test]
fn encode_rejects_unknown_tokens() {
    let output = run(&["encode", "--expr", "x @ y"]);
    assert!(!output.status.success());
    assert!(stderr(&output).starts_with("error:"));
}

#[test]
fn targets_expr_prints_the_supervision_table() {
    let output = run(&["targets", "--expr", "y^{3}"]);
    assert_ok(&output);
    assert_eq!(
        stdout(&output),
        "y\tM\t0\tM\n^\tML\t1\tL\n{\tML\t1\tL\n3\tML\t1\tL\n}\tML\t1\tL\n"
    );
}

#[test]
fn targets_requires_exactly_one_input_mode() {
    let output = run(&["targets"]);
    assert!(!output.status.success());
    assert!(stderr(&output).contains("exactly one of --expr or --corpus"));
}

#[test]
fn complexity_is_uncapped_without_a_limit() {
    let output = run(&["complexity", "--expr", "x^{2^{2^{2_{2}}}}"]);
    assert_ok(&output);
    assert_eq!(stdout(&output), "4\n");

    let capped = run(&["complexity", "--expr", "x^{2^{2^{2_{2}}}}", "--max-nesting", "2"]);
    assert!(!capped.status.success(), "the cap should reject depth 4");
}

#[test]
fn custom_dictionaries_are_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let dict = dir.path().join("dict.txt");
    // A minimal dictionary still needs the structural tokens and triggers.
    std::fs::write(&dict, "q\nw\n+\n^\n_\n{\n}\n\\frac\n\\sqrt\n").unwrap();
    let output = run(&["--dict", path_str(&dict), "encode", "--expr", "q^{w}"]);
    assert_ok(&output);
    assert_eq!(stdout(&output), "q\tM\n^\tML\n{\tML\nw\tML\n}\tML\n");

    // Tokens outside the custom dictionary are rejected.
    let missing = run(&["--dict", path_str(&dict), "encode", "--expr", "x"]);
    assert!(!missing.status.success());
}

#[test]
fn gen_split_and_targets_cover_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let listing = dir.path().join("corpus.tsv");
    let output = run(&[
        "gen",
        "--count",
        "20",
        "--seed",
        "7",
        "--depth",
        "2",
        "--out",
        path_str(&listing),
    ]);
    assert_ok(&output);
    let text = std::fs::read_to_string(&listing).unwrap();
    assert_eq!(text.lines().count(), 20);
    assert!(text.starts_with("s0000\t"));

    let split = run(&["split", "--corpus", path_str(&listing)]);
    assert_ok(&split);
    let counts = stdout(&split);
    assert!(counts.lines().all(|line| line.starts_with("level ")));
    let total: usize = counts
        .lines()
        .map(|line| {
            line.split_whitespace()
                .nth(2)
                .and_then(|n| n.parse::<usize>().ok())
                .expect("count lines end in a number")
        })
        .sum();
    assert_eq!(total, 20);

    let table = dir.path().join("targets.tsv");
    let targets = run(&[
        "targets",
        "--corpus",
        path_str(&listing),
        "--out",
        path_str(&table),
    ]);
    assert_ok(&targets);
    assert_eq!(std::fs::read_to_string(&table).unwrap().lines().count(), 20);
}

#[test]
fn splitting_writes_per_level_listings() {
    let dir = tempfile::tempdir().unwrap();
    let listing = dir.path().join("corpus.tsv");
    std::fs::write(&listing, "a0\tx\na1\tx ^ { 2 }\na2\ty + 1\n").unwrap();
    let prefix = dir.path().join("by_depth");
    let output = run(&[
        "split",
        "--corpus",
        path_str(&listing),
        "--out",
        path_str(&prefix),
    ]);
    assert_ok(&output);
    let level0 = std::fs::read_to_string(dir.path().join("by_depth.level0.tsv")).unwrap();
    let level1 = std::fs::read_to_string(dir.path().join("by_depth.level1.tsv")).unwrap();
    assert_eq!(level0.lines().count(), 2);
    assert_eq!(level1, "a1\tx ^ { 2 }\n");
}

#[test]
fn rendering_rejects_expressions_that_do_not_fit() {
    let dir = tempfile::tempdir().unwrap();
    let listing = dir.path().join("corpus.tsv");
    std::fs::write(&listing, "wide\ta + b + c + d + e + f\n").unwrap();
    let output = run(&[
        "render",
        "--corpus",
        path_str(&listing),
        "--out",
        path_str(&dir.path().join("r.pfr")),
        "--grid",
        "4x4",
    ]);
    assert!(!output.status.success());
    assert!(stderr(&output).contains("wide"), "the failing id is named");
}

#[test]
fn train_decode_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let listing = dir.path().join("corpus.tsv");
    let rendered = dir.path().join("corpus.pfr");
    let model = dir.path().join("model.ckpt");
    let decoded = dir.path().join("pred.tsv");

    assert_ok(&run(&[
        "gen",
        "--count",
        "6",
        "--seed",
        "11",
        "--depth",
        "1",
        "--out",
        path_str(&listing),
    ]));
    assert_ok(&run(&[
        "render",
        "--corpus",
        path_str(&listing),
        "--out",
        path_str(&rendered),
        "--grid",
        "14x20",
    ]));
    // The metadata sidecar lives at <out>.json.
    assert!(dir.path().join("corpus.pfr.json").exists());

    let train = run(&[
        "train-toy",
        "--corpus",
        path_str(&rendered),
        "--out",
        path_str(&model),
        "--epochs",
        "3",
        "--channels",
        "8",
        "--heads",
        "2",
        "--seed",
        "3",
    ]);
    assert_ok(&train);
    let log = stdout(&train);
    assert_eq!(log.lines().count(), 3, "one line per epoch:\n{log}");
    assert!(log.lines().all(|line| line.starts_with("epoch ")));

    let decode = run(&[
        "decode",
        "--model",
        path_str(&model),
        "--corpus",
        path_str(&rendered),
        "--out",
        path_str(&decoded),
        "--max-len",
        "24",
    ]);
    assert_ok(&decode);
    let predictions = std::fs::read_to_string(&decoded).unwrap();
    assert_eq!(predictions.lines().count(), 6);
    assert!(predictions.lines().all(|line| line.starts_with('s')));

    let eval = run(&[
        "eval",
        "--pred",
        path_str(&decoded),
        "--gt",
        path_str(&listing),
    ]);
    assert_ok(&eval);
    let report = stdout(&eval);
    for key in ["exprate", "leq1", "leq2", "leq3", "cer", "n_samples"] {
        assert!(report.contains(key), "missing {key} in:\n{report}");
    }
    assert!(report.contains("\"n_samples\": 6"));

    // An untrained three-epoch model rarely decodes anything exactly, but
    // the pipeline must score it all the same.
    let self_eval = run(&[
        "eval",
        "--pred",
        path_str(&listing),
        "--gt",
        path_str(&listing),
    ]);
    assert_ok(&self_eval);
    assert!(stdout(&self_eval).contains("\"exprate\": 1.000000"));
}

#[test]
fn eval_rejects_mismatched_sample_ids() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.tsv");
    let pred = dir.path().join("pred.tsv");
    std::fs::write(&gt, "a\tx\nb\ty\n").unwrap();
    std::fs::write(&pred, "a\tx\nc\ty\n").unwrap();
    let output = run(&["eval", "--pred", path_str(&pred), "--gt", path_str(&gt)]);
    assert!(!output.status.success());
    assert!(stderr(&output).contains("different sample ids"));
}

#[test]
fn gradcheck_stays_within_tolerance() {
    let output = run(&[
        "gradcheck",
        "--count",
        "1",
        "--grid",
        "6x6",
        "--seed",
        "5",
    ]);
    assert_ok(&output);
    let line = stdout(&output);
    assert!(line.contains("max relative error"), "got: {line}");
}

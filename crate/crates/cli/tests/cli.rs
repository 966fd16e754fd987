//! End-to-end checks of the `persim` binary: flag parsing, exit codes, and
//! the small file-in/file-out subcommands. The full experiment pipeline is
//! exercised by the acceptance suite; these tests stay fast.

use std::path::Path;
use std::process::{Command, Output};

fn persim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_persim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn eval_on_identical_files_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp.txt");
    let refs = dir.path().join("ref.txt");
    let text = "turn on the kitchen lights\nplay abba on spotify\nstop the fan\n";
    write(&hyp, text);
    write(&refs, text);

    let out = persim(&[
        "eval",
        "--metric",
        "atsr",
        "--hyp",
        hyp.to_str().unwrap(),
        "--ref",
        refs.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    assert_eq!(stdout(&out).trim(), "100.0");

    let out = persim(&[
        "eval",
        "--metric",
        "wer",
        "--hyp",
        hyp.to_str().unwrap(),
        "--ref",
        refs.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    assert_eq!(stdout(&out).trim(), "0.0");
}

#[test]
fn usage_errors_exit_1_and_data_errors_exit_2() {
    // Unknown subcommand and missing required flags are usage errors.
    assert_eq!(persim(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(persim(&["eval", "--metric", "wer"]).status.code(), Some(1));
    // Help is not an error.
    assert_eq!(persim(&["--help"]).status.code(), Some(0));

    // A present-but-unreadable input is a data error.
    let out = persim(&[
        "eval",
        "--metric",
        "wer",
        "--hyp",
        "/nonexistent/h.txt",
        "--ref",
        "/nonexistent/r.txt",
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");

    // An unknown metric is rejected at flag parsing, so it is usage too.
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("x.txt");
    write(&f, "hello\n");
    let out = persim(&[
        "eval",
        "--metric",
        "bleu",
        "--hyp",
        f.to_str().unwrap(),
        "--ref",
        f.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1), "{out:?}");
}

#[test]
fn write_default_config_emits_parseable_toml() {
    let out = persim(&["run", "--write-default-config"]);
    assert!(out.status.success(), "{out:?}");
    let cfg = persim_cli::experiment::ExperimentConfig::from_toml(&stdout(&out)).unwrap();
    assert_eq!(cfg.seed, 42);
    assert_eq!(cfg.ondevice.rounds, 10);
}

#[test]
fn report_regenerates_the_bundle_from_results_toml() {
    use persim_cli::experiment::{ExperimentResult, SpeakerOutcome};
    use persim_core::synthcorpus::Severity;

    let mk = |speaker: &str, severity| SpeakerOutcome {
        speaker: speaker.into(),
        severity,
        bm_wer: 50.0,
        sm_wer: 30.0,
        pers_server_all: 10.0,
        pers_server_50: 12.0,
        pers_ondevice: 11.0,
        bm_atsr: 20.0,
        sm_atsr: 50.0,
        atsr_server_all: 80.0,
        atsr_server_50: 78.0,
        atsr_ondevice: 79.0,
        wer_by_round: (0..=10).map(|r| 30.0 - r as f64).collect(),
        consecutive_cost: 18.0,
        single_cost: 25.0,
        utterances_consumed: 50,
        max_buffer_len: 5,
        buffer_len_between_rounds: vec![0; 10],
        seed_best_epoch: 2,
        seed_dev_wer: 31.0,
    };
    let result = ExperimentResult {
        seed: 9,
        corpus_digest: u64::MAX - 3,
        pretrain_losses: vec![2.0, 0.4],
        base_best_epoch: 5,
        base_dev_wer: 1.0,
        base_dev_wer_trace: vec![9.0, 1.0],
        typical_test_wer: 1.2,
        rounds: 10,
        outcomes: vec![
            mk("mild01", Severity::Mild),
            mk("mod01", Severity::Moderate),
            mk("sev01", Severity::Severe),
        ],
    };

    let dir = tempfile::tempdir().unwrap();
    let results_path = dir.path().join("results.toml");
    write(&results_path, &persim_cli::reports::results_toml(&result).unwrap());

    let out_dir = dir.path().join("bundle");
    let out = persim(&[
        "report",
        "--results",
        results_path.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");

    for file in [
        "wer_summary.csv",
        "atsr_summary.csv",
        "correction_cost.csv",
        "wer_by_round.csv",
        "tables.md",
    ] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }
    let rounds_csv = std::fs::read_to_string(out_dir.join("wer_by_round.csv")).unwrap();
    // Header plus 3 speakers x rounds 0..=10.
    assert_eq!(rounds_csv.lines().count(), 1 + 3 * 11);
    assert!(rounds_csv.lines().any(|l| l == "mild01,MILD,10,20.00"));
}

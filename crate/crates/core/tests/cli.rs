//! End-to-end tests of the command layer and the installed binary: CSV
//! layouts, benign-reference semantics, sweep output, embedding export, and
//! the FEDSIM_SEED override.

use std::fs;
use std::path::Path;
use std::process::Command;

use fedsim_core::commands::{cmd_benign_ref, cmd_export_embeddings, cmd_run, cmd_sweep};

const SMALL: &str = "data.samples_per_class = 30\nfl.rounds = 12\nfl.summary_window = 5\n";

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn run_writes_expected_row_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("exp.conf");
    write(&conf, "data.samples_per_class = 30\nfl.rounds = 2\nfl.summary_window = 1\n");
    let out = tmp.path().join("out");
    cmd_run(&conf, &out).unwrap();

    let metrics = read(&out.join("metrics.csv"));
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "round,clean_acc,asr");
    assert_eq!(lines.len(), 3, "expected header + 2 data rows");
    assert!(lines[1].starts_with("0,"));
    assert!(lines[2].starts_with("1,"));

    let summary = read(&out.join("summary.csv"));
    assert!(summary.starts_with("metric,mean,std,window\n"));
    assert_eq!(summary.lines().count(), 3);

    let log = read(&out.join("run.log"));
    assert_eq!(log.lines().filter(|l| l.starts_with("round=")).count(), 2);
    for line in log.lines().filter(|l| l.starts_with("round=")) {
        assert!(line.contains(" acc="));
        assert!(line.contains(" asr="));
        assert!(line.contains(" rule=fedavg"));
        assert!(line.contains(" selected="));
    }
}

#[test]
fn summary_matches_hand_average_of_metrics_tail() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("exp.conf");
    write(&conf, SMALL);
    let out = tmp.path().join("out");
    cmd_run(&conf, &out).unwrap();

    let metrics = read(&out.join("metrics.csv"));
    let rows: Vec<(f64, f64)> = metrics
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 12);
    let tail = &rows[rows.len() - 5..];
    let acc_mean: f64 = tail.iter().map(|r| r.0).sum::<f64>() / 5.0;
    let asr_mean: f64 = tail.iter().map(|r| r.1).sum::<f64>() / 5.0;

    let summary = read(&out.join("summary.csv"));
    let parse_row = |name: &str| -> (f64, f64, usize) {
        let line = summary
            .lines()
            .find(|l| l.starts_with(name))
            .unwrap_or_else(|| panic!("no {name} row"));
        let f: Vec<&str> = line.split(',').collect();
        (f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
    };
    let (acc, _, win) = parse_row("clean_acc");
    let (asr, _, _) = parse_row("asr");
    assert_eq!(win, 5);
    // The CSV rounds to six significant digits, so compare at that precision.
    assert!((acc - acc_mean).abs() < 1e-4, "{acc} vs hand {acc_mean}");
    assert!((asr - asr_mean).abs() < 1e-4, "{asr} vs hand {asr_mean}");
}

#[test]
fn benign_reference_drops_malicious_clients() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("exp.conf");
    write(&conf, SMALL);
    let out = tmp.path().join("benign");
    cmd_benign_ref(&conf, &out).unwrap();
    let log = read(&out.join("run.log"));
    assert!(
        log.lines().next().unwrap().contains("mode=benign_only clients=6"),
        "log header: {}",
        log.lines().next().unwrap()
    );
}

#[test]
fn benign_reference_equals_run_without_malicious_clients() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("exp.conf");
    write(
        &conf,
        "data.samples_per_class = 30\nfl.rounds = 4\nfl.summary_window = 2\nfl.malicious_count = 0\nattack.mode = none\n",
    );
    let out_run = tmp.path().join("run");
    let out_ref = tmp.path().join("ref");
    cmd_run(&conf, &out_run).unwrap();
    cmd_benign_ref(&conf, &out_ref).unwrap();
    assert_eq!(
        read(&out_run.join("metrics.csv")),
        read(&out_ref.join("metrics.csv"))
    );
    assert_eq!(
        read(&out_run.join("summary.csv")),
        read(&out_ref.join("summary.csv"))
    );
}

#[test]
fn sweep_row_counts_and_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("exp.conf");
    write(&conf, "data.samples_per_class = 30\nfl.rounds = 6\nfl.summary_window = 3\nfl.clients = 10\n");

    // 1 value x 1 seed: one data row plus one aggregate row.
    let sweep1 = tmp.path().join("one.sweep");
    write(&sweep1, "sweep.key = attack.lambda_sep\nsweep.values = 1.0\nsweep.seeds = 7\n");
    let out1 = tmp.path().join("s1");
    cmd_sweep(&conf, &sweep1, &out1).unwrap();
    let csv = read(&out1.join("sweep.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "key,value,seed,clean_acc_mean,clean_acc_std,asr_mean,asr_std"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("attack.lambda_sep,1.0,7,"));
    assert!(lines[2].starts_with("attack.lambda_sep,1.0,all,"));

    // malicious_ratio sweep: values x seeds data rows plus one aggregate per
    // value, and the aggregate equals the hand mean of its seed rows.
    let sweep2 = tmp.path().join("ratio.sweep");
    write(
        &sweep2,
        "sweep.key = malicious_ratio\nsweep.values = 0.1, 0.4\nsweep.seeds = 1, 2, 3\n",
    );
    let out2 = tmp.path().join("s2");
    cmd_sweep(&conf, &sweep2, &out2).unwrap();
    let csv = read(&out2.join("sweep.csv"));
    let data_rows: Vec<Vec<String>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    assert_eq!(data_rows.len(), 8, "6 data rows + 2 aggregate rows");
    let seed_rows: Vec<&Vec<String>> = data_rows.iter().filter(|r| r[2] != "all").collect();
    let agg_rows: Vec<&Vec<String>> = data_rows.iter().filter(|r| r[2] == "all").collect();
    assert_eq!(seed_rows.len(), 6);
    assert_eq!(agg_rows.len(), 2);
    for agg in agg_rows {
        let value = &agg[1];
        let asr_means: Vec<f64> = seed_rows
            .iter()
            .filter(|r| &r[1] == value)
            .map(|r| r[5].parse().unwrap())
            .collect();
        assert_eq!(asr_means.len(), 3);
        let hand = asr_means.iter().sum::<f64>() / 3.0;
        let got: f64 = agg[5].parse().unwrap();
        assert!((got - hand).abs() < 1e-4, "aggregate {got} vs hand {hand}");
    }
}

#[test]
fn sweep_failure_identifies_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("exp.conf");
    // multikrum with 4 clients and auto f = malicious count: the second
    // sweep value sets 2 malicious clients, violating n >= f + 3.
    write(
        &conf,
        "data.samples_per_class = 30\nfl.rounds = 2\nfl.summary_window = 1\nfl.clients = 4\nfl.malicious_count = 1\nagg.rule = multikrum\n",
    );
    let sweep = tmp.path().join("bad.sweep");
    write(
        &sweep,
        "sweep.key = malicious_ratio\nsweep.values = 0.25, 0.5\nsweep.seeds = 1\n",
    );
    let out = tmp.path().join("out");
    let err = cmd_sweep(&conf, &sweep, &out).unwrap_err();
    let message = err.to_string();
    assert!(
        message.contains("malicious_ratio=0.5") && message.contains("seed=1"),
        "error does not identify the failing cell: {message}"
    );
}

#[test]
fn export_embeddings_writes_feature_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("exp.conf");
    write(
        &conf,
        "data.samples_per_class = 20\nfl.rounds = 2\nfl.summary_window = 1\nmodel.hidden_dim = 4\n",
    );
    let out = tmp.path().join("emb");
    cmd_export_embeddings(&conf, &out, "final").unwrap();
    let csv = read(&out.join("embeddings.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "base_id,label,is_triggered,predicted,f0,f1,f2,f3");
    // 80 clean test samples plus 60 triggered (target class excluded).
    assert_eq!(lines.len(), 1 + 80 + 60);

    assert!(cmd_export_embeddings(&conf, &out, "5").is_err());
}

#[test]
fn binary_honors_fedsim_seed_env() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("exp.conf");
    write(&conf, "data.samples_per_class = 30\nfl.rounds = 3\nfl.summary_window = 2\n");
    let conf9 = tmp.path().join("exp9.conf");
    write(
        &conf9,
        "data.samples_per_class = 30\nfl.rounds = 3\nfl.summary_window = 2\nfl.seed = 9\n",
    );

    let bin = env!("CARGO_BIN_EXE_fedsim");
    let out_env = tmp.path().join("env");
    let status = Command::new(bin)
        .args(["run", "--config"])
        .arg(&conf)
        .arg("--out")
        .arg(&out_env)
        .env("FEDSIM_SEED", "9")
        .status()
        .unwrap();
    assert!(status.success());

    let out_direct = tmp.path().join("direct");
    let status = Command::new(bin)
        .args(["run", "--config"])
        .arg(&conf9)
        .arg("--out")
        .arg(&out_direct)
        .env_remove("FEDSIM_SEED")
        .status()
        .unwrap();
    assert!(status.success());

    assert_eq!(
        read(&out_env.join("metrics.csv")),
        read(&out_direct.join("metrics.csv"))
    );
}

#[test]
fn binary_exits_nonzero_on_bad_config() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("bad.conf");
    write(&conf, "fl.rounds = -1\n");
    let out = tmp.path().join("out");
    let output = Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(["run", "--config"])
        .arg(&conf)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("line 1"), "stderr: {stderr}");
}

//! Command implementations behind the `fedsim` binary: run a single
//! experiment, sweep a knob across values and seeds, run the benign-only
//! reference, and export penultimate-layer embeddings.
//!
//! All CSV output uses a fixed column order, `.` decimals, six significant
//! digits, and `\n` line endings, so identical runs produce byte-identical
//! files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::{
    parse_config, parse_config_with_overrides, parse_sweep, sweep_overrides, SweepSpec,
};
use crate::error::{Result, SimError};
use crate::federation::{run_experiment, ExperimentRun, RoundMetrics, Summary};
use crate::fmt::fmt_f64;

/// Parses an optional `FEDSIM_SEED`-style override value.
pub fn parse_seed_override(value: Option<&str>) -> Result<Option<u64>> {
    match value {
        None => Ok(None),
        Some(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| SimError::invalid(format!("FEDSIM_SEED must be an integer, got '{s}'"))),
    }
}

fn seed_override_from_env() -> Result<Option<u64>> {
    match std::env::var("FEDSIM_SEED") {
        Ok(v) => parse_seed_override(Some(&v)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(SimError::invalid("FEDSIM_SEED is not valid unicode"))
        }
    }
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        SimError::ConfigGeneral(format!("cannot read config '{}': {e}", path.display()))
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| SimError::ConfigGeneral(format!("cannot write '{}': {e}", path.display())))
}

fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from("round,clean_acc,asr\n");
    for m in metrics {
        out.push_str(&format!(
            "{},{},{}\n",
            m.round,
            fmt_f64(m.clean_accuracy),
            fmt_f64(m.asr)
        ));
    }
    out
}

fn summary_csv(summary: &Summary) -> String {
    let mut out = String::from("metric,mean,std,window\n");
    out.push_str(&format!(
        "clean_acc,{},{},{}\n",
        fmt_f64(summary.clean_acc_mean),
        fmt_f64(summary.clean_acc_std),
        summary.window
    ));
    out.push_str(&format!(
        "asr,{},{},{}\n",
        fmt_f64(summary.asr_mean),
        fmt_f64(summary.asr_std),
        summary.window
    ));
    out
}

fn run_log(run: &ExperimentRun, mode: &str) -> String {
    let config = run.state.config();
    let rule = config.agg.rule.name();
    let mut out = format!(
        "# mode={mode} clients={} rule={rule} seed={}\n",
        config.participating_clients(),
        config.seed
    );
    for m in &run.metrics {
        let selected = match &m.selected {
            Some(ids) if !ids.is_empty() => ids
                .iter()
                .map(|id| id.to_string())
                .collect::<Vec<_>>()
                .join(","),
            Some(_) => "-".to_string(),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "round={} acc={} asr={} rule={rule} selected={selected}\n",
            m.round,
            fmt_f64(m.clean_accuracy),
            fmt_f64(m.asr)
        ));
        if let Some(scores) = &m.scores {
            let rendered: Vec<String> = scores
                .iter()
                .map(|(id, s)| format!("{id}:{}", fmt_f64(*s)))
                .collect();
            out.push_str(&format!("# scores round={} {}\n", m.round, rendered.join(" ")));
        }
        if let Some(t) = &m.malicious_terms {
            out.push_str(&format!(
                "# terms round={} ce_pair={} ce_clean={} ce_trig={} sep={} reg={}\n",
                m.round,
                fmt_f64(t.ce_pair),
                fmt_f64(t.ce_clean),
                fmt_f64(t.ce_trig),
                fmt_f64(t.sep),
                fmt_f64(t.reg)
            ));
        }
    }
    out
}

fn execute(config_text: &str, seed_override: Option<u64>, benign_only: bool) -> Result<ExperimentRun> {
    let mut config = parse_config(config_text)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    config.benign_only = benign_only;
    run_experiment(config)
}

fn write_run_outputs(run: &ExperimentRun, out_dir: &Path, mode: &str) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    write_file(out_dir, "metrics.csv", &metrics_csv(&run.metrics))?;
    write_file(out_dir, "summary.csv", &summary_csv(&run.summary))?;
    write_file(out_dir, "run.log", &run_log(run, mode))?;
    Ok(())
}

/// `fedsim run`: one experiment; writes `metrics.csv`, `summary.csv`,
/// `run.log` into the output directory.
pub fn cmd_run(config_path: &Path, out_dir: &Path) -> Result<()> {
    let text = read_config(config_path)?;
    let run = execute(&text, seed_override_from_env()?, false)?;
    write_run_outputs(&run, out_dir, "run")
}

/// `fedsim benign`: the same configuration with malicious clients dropped
/// entirely; remaining clients keep their original partitions.
pub fn cmd_benign_ref(config_path: &Path, out_dir: &Path) -> Result<()> {
    let text = read_config(config_path)?;
    let run = execute(&text, seed_override_from_env()?, true)?;
    write_run_outputs(&run, out_dir, "benign_only")
}

struct SweepRow {
    value: String,
    seed: String,
    summary: Summary,
}

fn sweep_csv(key_name: &str, rows: &[SweepRow], aggregates: &[SweepRow]) -> String {
    let mut out = String::from("key,value,seed,clean_acc_mean,clean_acc_std,asr_mean,asr_std\n");
    for row in rows.iter().chain(aggregates) {
        out.push_str(&format!(
            "{key_name},{},{},{},{},{},{}\n",
            row.value,
            row.seed,
            fmt_f64(row.summary.clean_acc_mean),
            fmt_f64(row.summary.clean_acc_std),
            fmt_f64(row.summary.asr_mean),
            fmt_f64(row.summary.asr_std)
        ));
    }
    out
}

fn cross_seed_aggregate(value: &str, per_seed: &[Summary]) -> SweepRow {
    let accs: Vec<f64> = per_seed.iter().map(|s| s.clean_acc_mean).collect();
    let asrs: Vec<f64> = per_seed.iter().map(|s| s.asr_mean).collect();
    let (acc_mean, acc_std) = mean_std(&accs);
    let (asr_mean, asr_std) = mean_std(&asrs);
    SweepRow {
        value: value.to_string(),
        seed: "all".to_string(),
        summary: Summary {
            clean_acc_mean: acc_mean,
            clean_acc_std: acc_std,
            asr_mean,
            asr_std,
            window: per_seed.first().map(|s| s.window).unwrap_or(0),
        },
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs a parsed sweep against a config text and returns the rendered
/// `sweep.csv` contents.
pub fn run_sweep(config_text: &str, spec: &SweepSpec) -> Result<String> {
    let base = parse_config(config_text)?;
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut aggregates: Vec<SweepRow> = Vec::new();
    for value in &spec.values {
        let mut per_seed = Vec::new();
        for &seed in &spec.seeds {
            let mut overrides = sweep_overrides(spec.key, value, &base)?;
            overrides.push(("fl.seed", seed.to_string()));
            let config = parse_config_with_overrides(config_text, &overrides).map_err(|e| {
                SimError::ConfigGeneral(format!(
                    "sweep cell {}={value} seed={seed}: {e}",
                    spec.key.name()
                ))
            })?;
            let run = run_experiment(config).map_err(|e| {
                SimError::ConfigGeneral(format!(
                    "sweep cell {}={value} seed={seed}: {e}",
                    spec.key.name()
                ))
            })?;
            per_seed.push(run.summary);
            rows.push(SweepRow {
                value: value.clone(),
                seed: seed.to_string(),
                summary: run.summary,
            });
        }
        aggregates.push(cross_seed_aggregate(value, &per_seed));
    }
    Ok(sweep_csv(spec.key.name(), &rows, &aggregates))
}

/// `fedsim sweep`: one run per (value, seed); writes `sweep.csv`.
pub fn cmd_sweep(config_path: &Path, sweep_path: &Path, out_dir: &Path) -> Result<()> {
    let config_text = read_config(config_path)?;
    let sweep_text = read_config(sweep_path)?;
    let spec = parse_sweep(&sweep_text)?;
    let csv = run_sweep(&config_text, &spec)?;
    fs::create_dir_all(out_dir)?;
    write_file(out_dir, "sweep.csv", &csv)
}

/// `fedsim export-embeddings`: runs the experiment and writes the
/// penultimate-layer features of the final global model on the clean and
/// triggered test sets to `embeddings.csv`.
pub fn cmd_export_embeddings(config_path: &Path, out_dir: &Path, round: &str) -> Result<()> {
    if round != "final" {
        return Err(SimError::invalid(format!(
            "unsupported --round '{round}' (only 'final' is available)"
        )));
    }
    let text = read_config(config_path)?;
    let run = execute(&text, seed_override_from_env()?, false)?;
    let state = &run.state;
    let mut samples = state.clean_test().to_vec();
    samples.extend_from_slice(state.trig_test());
    let mut buf: Vec<u8> = Vec::new();
    crate::federation::export_embeddings(
        state.global(),
        &state.config().dims,
        &samples,
        &mut buf,
    )?;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("embeddings.csv");
    let mut file = fs::File::create(&path)
        .map_err(|e| SimError::ConfigGeneral(format!("cannot write '{}': {e}", path.display())))?;
    file.write_all(&buf)?;
    Ok(())
}

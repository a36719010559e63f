//! Flat `key = value` experiment configuration.
//!
//! One pair per line, `#` comments, dotted keys. Every key has a documented
//! default; unknown keys are rejected so a typo can never silently fall back
//! to a default. Errors carry the offending line number.

use std::collections::{BTreeMap, BTreeSet};

use crate::aggregation::{AggConfig, AggRule};
use crate::attack::MaliciousHyper;
use crate::data::{trigger_unit_direction, DataSpec};
use crate::error::{Result, SimError};
use crate::federation::{AttackMode, ExperimentConfig};
use crate::model::{ModelDims, SgdConfig};

/// One configuration key: name, default (as written in a config file), and a
/// one-line description.
pub struct ConfigKey {
    pub name: &'static str,
    pub default: &'static str,
    pub doc: &'static str,
}

/// Every recognized key with its default.
pub const CONFIG_KEYS: &[ConfigKey] = &[
    ConfigKey { name: "model.hidden_dim", default: "32", doc: "hidden layer width" },
    ConfigKey { name: "data.num_classes", default: "4", doc: "number of classes (>= 2)" },
    ConfigKey { name: "data.input_dim", default: "20", doc: "feature dimension" },
    ConfigKey { name: "data.samples_per_class", default: "150", doc: "per-class count for each of train and test" },
    ConfigKey { name: "data.class_mean_scale", default: "4.0", doc: "distance of class means from the origin" },
    ConfigKey { name: "data.class_noise_std", default: "1.0", doc: "within-class Gaussian noise std" },
    ConfigKey { name: "data.trigger_scale", default: "8.0", doc: "norm of the additive trigger direction (at most 2 * class_mean_scale)" },
    ConfigKey { name: "data.trigger_noise_std", default: "0.01", doc: "per-sample noise added with the trigger" },
    ConfigKey { name: "data.alpha", default: "0.5", doc: "Dirichlet concentration of the non-IID partition" },
    ConfigKey { name: "attack.mode", default: "sable", doc: "none | sable | baseline" },
    ConfigKey { name: "attack.target_label", default: "0", doc: "backdoor target class" },
    ConfigKey { name: "attack.lambda_sep", default: "1.0", doc: "feature-separation weight" },
    ConfigKey { name: "attack.lambda_reg", default: "200.0", doc: "parameter-regularization weight" },
    ConfigKey { name: "attack.margin_delta", default: "1.0", doc: "feature-separation margin" },
    ConfigKey { name: "attack.mask_fraction", default: "0.0", doc: "fraction of highest-importance coordinates masked (0 disables)" },
    ConfigKey { name: "attack.pair_fraction", default: "0.08", doc: "fraction of a malicious client's data turned into pairs" },
    ConfigKey { name: "attack.clean_fraction", default: "0.78", doc: "fraction kept as clean-only samples" },
    ConfigKey { name: "attack.trig_fraction", default: "0.06", doc: "fraction turned into trigger-only samples" },
    ConfigKey { name: "fl.clients", default: "8", doc: "number of clients" },
    ConfigKey { name: "fl.malicious_count", default: "2", doc: "malicious client count (ids 0..count unless fl.malicious_ids is set)" },
    ConfigKey { name: "fl.malicious_ids", default: "", doc: "explicit malicious client ids, comma separated (overrides fl.malicious_count)" },
    ConfigKey { name: "fl.local_epochs", default: "1", doc: "local epochs per round" },
    ConfigKey { name: "fl.batch_size", default: "4", doc: "local mini-batch size" },
    ConfigKey { name: "fl.rounds", default: "50", doc: "federated rounds" },
    ConfigKey { name: "fl.summary_window", default: "10", doc: "final rounds summarized as mean +/- std" },
    ConfigKey { name: "fl.seed", default: "42", doc: "master seed (env FEDSIM_SEED overrides)" },
    ConfigKey { name: "fl.parallel", default: "true", doc: "run client updates concurrently (results are identical either way)" },
    ConfigKey { name: "opt.learning_rate", default: "0.05", doc: "SGD learning rate" },
    ConfigKey { name: "opt.momentum", default: "0.9", doc: "SGD momentum coefficient" },
    ConfigKey { name: "opt.weight_decay", default: "0.0005", doc: "SGD weight decay" },
    ConfigKey { name: "agg.rule", default: "fedavg", doc: "fedavg | median | trimmed_mean | multikrum | flame_lite" },
    ConfigKey { name: "agg.trim_fraction", default: "0.25", doc: "trimmed_mean: fraction discarded per end" },
    ConfigKey { name: "agg.byz_bound", default: "auto", doc: "multikrum f; auto = malicious client count" },
    ConfigKey { name: "agg.krum_select", default: "auto", doc: "multikrum m; auto = clients - f" },
    ConfigKey { name: "agg.flame_threshold", default: "1.0", doc: "flame_lite cosine-distance cut, in (0, 2)" },
    ConfigKey { name: "agg.flame_noise", default: "0.001", doc: "flame_lite noise multiplier" },
];

fn default_of(key: &str) -> &'static str {
    CONFIG_KEYS
        .iter()
        .find(|k| k.name == key)
        .map(|k| k.default)
        .expect("unknown internal config key")
}

/// Whether `key` is a recognized configuration key.
pub fn is_known_key(key: &str) -> bool {
    CONFIG_KEYS.iter().any(|k| k.name == key)
}

struct RawEntry {
    line: usize,
    value: String,
}

struct Doc {
    entries: BTreeMap<String, RawEntry>,
}

fn config_err(line: usize, message: impl Into<String>) -> SimError {
    let message = message.into();
    if line == 0 {
        SimError::ConfigGeneral(message)
    } else {
        SimError::Config { line, message }
    }
}

impl Doc {
    fn parse(text: &str) -> Result<Doc> {
        let known: BTreeSet<&str> = CONFIG_KEYS.iter().map(|k| k.name).collect();
        let mut entries: BTreeMap<String, RawEntry> = BTreeMap::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw_line.find('#') {
                Some(p) => &raw_line[..p],
                None => raw_line,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let Some(eq) = stripped.find('=') else {
                return Err(config_err(line, format!("expected 'key = value', got '{stripped}'")));
            };
            let key = stripped[..eq].trim();
            let value = stripped[eq + 1..].trim();
            if !known.contains(key) {
                return Err(config_err(line, format!("unknown key '{key}'")));
            }
            if entries.contains_key(key) {
                return Err(config_err(
                    line,
                    format!("duplicate key '{key}' (first set on line {})", entries[key].line),
                ));
            }
            entries.insert(
                key.to_string(),
                RawEntry {
                    line,
                    value: value.to_string(),
                },
            );
        }
        Ok(Doc { entries })
    }

    fn apply_overrides(&mut self, overrides: &[(&str, String)]) {
        for (key, value) in overrides {
            debug_assert!(CONFIG_KEYS.iter().any(|k| k.name == *key));
            self.entries.insert(
                key.to_string(),
                RawEntry {
                    line: 0,
                    value: value.clone(),
                },
            );
        }
    }

    /// Returns (line, value); line 0 means the default was used.
    fn lookup(&self, key: &str) -> (usize, &str) {
        match self.entries.get(key) {
            Some(e) => (e.line, e.value.as_str()),
            None => (0, default_of(key)),
        }
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map(|e| e.line).unwrap_or(0)
    }

    fn f64(&self, key: &str) -> Result<f64> {
        let (line, v) = self.lookup(key);
        v.parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| config_err(line, format!("{key}: expected a finite number, got '{v}'")))
    }

    fn usize(&self, key: &str) -> Result<usize> {
        let (line, v) = self.lookup(key);
        v.parse::<usize>()
            .map_err(|_| config_err(line, format!("{key}: expected a nonnegative integer, got '{v}'")))
    }

    fn u64(&self, key: &str) -> Result<u64> {
        let (line, v) = self.lookup(key);
        v.parse::<u64>()
            .map_err(|_| config_err(line, format!("{key}: expected a nonnegative integer, got '{v}'")))
    }

    fn bool(&self, key: &str) -> Result<bool> {
        let (line, v) = self.lookup(key);
        match v {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(config_err(line, format!("{key}: expected true or false, got '{v}'"))),
        }
    }

    fn usize_or_auto(&self, key: &str) -> Result<Option<usize>> {
        let (line, v) = self.lookup(key);
        if v == "auto" {
            return Ok(None);
        }
        v.parse::<usize>().map(Some).map_err(|_| {
            config_err(line, format!("{key}: expected 'auto' or an integer, got '{v}'"))
        })
    }

    fn id_list(&self, key: &str) -> Result<Vec<usize>> {
        let (line, v) = self.lookup(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|part| {
                part.trim().parse::<usize>().map_err(|_| {
                    config_err(line, format!("{key}: '{}' is not a client id", part.trim()))
                })
            })
            .collect()
    }

    fn check(&self, key: &str, ok: bool, message: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(config_err(self.line_of(key), format!("{key}: {message}")))
        }
    }
}

fn build_config(doc: &Doc) -> Result<ExperimentConfig> {
    let hidden_dim = doc.usize("model.hidden_dim")?;
    doc.check("model.hidden_dim", hidden_dim >= 1, "must be >= 1")?;

    let num_classes = doc.usize("data.num_classes")?;
    doc.check("data.num_classes", num_classes >= 2, "must be >= 2")?;
    let input_dim = doc.usize("data.input_dim")?;
    doc.check("data.input_dim", input_dim >= 1, "must be >= 1")?;
    let samples_per_class = doc.usize("data.samples_per_class")?;
    doc.check("data.samples_per_class", samples_per_class >= 1, "must be >= 1")?;

    let class_mean_scale = doc.f64("data.class_mean_scale")?;
    let class_noise_std = doc.f64("data.class_noise_std")?;
    doc.check("data.class_noise_std", class_noise_std > 0.0, "must be > 0")?;
    let trigger_scale = doc.f64("data.trigger_scale")?;
    doc.check("data.trigger_scale", trigger_scale > 0.0, "must be > 0")?;
    // Keep the trigger an in-distribution shift relative to the class layout.
    doc.check(
        "data.trigger_scale",
        trigger_scale <= 2.0 * class_mean_scale,
        "must be at most 2 * data.class_mean_scale",
    )?;
    let trigger_noise_std = doc.f64("data.trigger_noise_std")?;
    doc.check("data.trigger_noise_std", trigger_noise_std >= 0.0, "must be >= 0")?;
    let alpha = doc.f64("data.alpha")?;
    doc.check("data.alpha", alpha > 0.0, "must be > 0")?;

    let num_clients = doc.usize("fl.clients")?;
    doc.check("fl.clients", num_clients >= 1, "must be >= 1")?;

    let explicit_ids = doc.id_list("fl.malicious_ids")?;
    let malicious_ids: BTreeSet<usize> = if explicit_ids.is_empty() {
        let count = doc.usize("fl.malicious_count")?;
        doc.check(
            "fl.malicious_count",
            count <= num_clients,
            "cannot exceed fl.clients",
        )?;
        (0..count).collect()
    } else {
        let set: BTreeSet<usize> = explicit_ids.iter().copied().collect();
        doc.check(
            "fl.malicious_ids",
            set.len() == explicit_ids.len(),
            "contains duplicate ids",
        )?;
        doc.check(
            "fl.malicious_ids",
            set.iter().all(|&id| id < num_clients),
            "contains an id >= fl.clients",
        )?;
        set
    };

    let local_epochs = doc.usize("fl.local_epochs")?;
    doc.check("fl.local_epochs", local_epochs >= 1, "must be >= 1")?;
    let batch_size = doc.usize("fl.batch_size")?;
    doc.check("fl.batch_size", batch_size >= 1, "must be >= 1")?;
    let rounds = doc.usize("fl.rounds")?;
    doc.check("fl.rounds", rounds >= 1, "must be >= 1")?;
    let summary_window = doc.usize("fl.summary_window")?;
    doc.check(
        "fl.summary_window",
        (1..=rounds).contains(&summary_window),
        "must be in [1, fl.rounds]",
    )?;
    let seed = doc.u64("fl.seed")?;
    let parallel = doc.bool("fl.parallel")?;

    let attack_mode = {
        let (line, v) = doc.lookup("attack.mode");
        AttackMode::parse(v).map_err(|e| config_err(line, e.to_string()))?
    };
    let target_label = doc.usize("attack.target_label")?;
    doc.check(
        "attack.target_label",
        target_label < num_classes,
        "must be < data.num_classes",
    )?;
    let lambda_sep = doc.f64("attack.lambda_sep")?;
    doc.check("attack.lambda_sep", lambda_sep >= 0.0, "must be >= 0")?;
    let lambda_reg = doc.f64("attack.lambda_reg")?;
    doc.check("attack.lambda_reg", lambda_reg >= 0.0, "must be >= 0")?;
    let margin_delta = doc.f64("attack.margin_delta")?;
    doc.check("attack.margin_delta", margin_delta > 0.0, "must be > 0")?;
    let mask_fraction = doc.f64("attack.mask_fraction")?;
    doc.check(
        "attack.mask_fraction",
        (0.0..=1.0).contains(&mask_fraction),
        "must be in [0, 1]",
    )?;
    let pair_fraction = doc.f64("attack.pair_fraction")?;
    let clean_fraction = doc.f64("attack.clean_fraction")?;
    let trig_fraction = doc.f64("attack.trig_fraction")?;
    for key in ["attack.pair_fraction", "attack.clean_fraction", "attack.trig_fraction"] {
        let v = doc.f64(key)?;
        doc.check(key, (0.0..=1.0).contains(&v), "must be in [0, 1]")?;
    }
    doc.check(
        "attack.pair_fraction",
        pair_fraction + clean_fraction + trig_fraction <= 1.0 + 1e-12,
        "pair + clean + trig fractions must sum to at most 1",
    )?;

    let learning_rate = doc.f64("opt.learning_rate")?;
    doc.check("opt.learning_rate", learning_rate >= 0.0, "must be >= 0")?;
    let momentum = doc.f64("opt.momentum")?;
    doc.check("opt.momentum", (0.0..1.0).contains(&momentum), "must be in [0, 1)")?;
    let weight_decay = doc.f64("opt.weight_decay")?;
    doc.check("opt.weight_decay", weight_decay >= 0.0, "must be >= 0")?;

    let rule = {
        let (line, v) = doc.lookup("agg.rule");
        AggRule::parse(v).map_err(|e| config_err(line, e.to_string()))?
    };
    let trim_fraction = doc.f64("agg.trim_fraction")?;
    doc.check(
        "agg.trim_fraction",
        (0.0..0.5).contains(&trim_fraction),
        "must be in [0, 0.5)",
    )?;
    let byz_bound = doc
        .usize_or_auto("agg.byz_bound")?
        .unwrap_or(malicious_ids.len());
    let krum_select = doc
        .usize_or_auto("agg.krum_select")?
        .unwrap_or_else(|| num_clients.saturating_sub(byz_bound));
    let flame_cluster_threshold = doc.f64("agg.flame_threshold")?;
    doc.check(
        "agg.flame_threshold",
        flame_cluster_threshold > 0.0 && flame_cluster_threshold < 2.0,
        "must be in (0, 2)",
    )?;
    let flame_noise_lambda = doc.f64("agg.flame_noise")?;
    doc.check("agg.flame_noise", flame_noise_lambda >= 0.0, "must be >= 0")?;

    if rule == AggRule::MultiKrum {
        doc.check(
            "agg.rule",
            num_clients >= byz_bound + 3,
            &format!("multikrum needs fl.clients >= f + 3 (clients = {num_clients}, f = {byz_bound})"),
        )?;
        doc.check(
            "agg.rule",
            (1..=num_clients).contains(&krum_select),
            &format!("multikrum selection m = {krum_select} must be in [1, {num_clients}]"),
        )?;
    }
    if rule == AggRule::TrimmedMean {
        let t = (trim_fraction * num_clients as f64).floor() as usize;
        doc.check(
            "agg.trim_fraction",
            num_clients > 2 * t,
            "trims away every update",
        )?;
    }

    let trigger_direction: Vec<f64> = trigger_unit_direction(input_dim)
        .into_iter()
        .map(|x| x * trigger_scale)
        .collect();

    let config = ExperimentConfig {
        dims: ModelDims {
            input_dim,
            hidden_dim,
            num_classes,
        },
        data: DataSpec {
            num_classes,
            input_dim,
            samples_per_class,
            class_mean_scale,
            class_noise_std,
            trigger_direction,
            trigger_noise_std,
        },
        num_clients,
        malicious_ids,
        attack_mode,
        hyper: MaliciousHyper {
            lambda_sep,
            lambda_reg,
            margin_delta,
            target_label,
            mask_fraction,
        },
        opt: SgdConfig {
            learning_rate,
            momentum,
            weight_decay,
        },
        local_epochs,
        batch_size,
        rounds,
        agg: AggConfig {
            rule,
            trim_fraction,
            byz_bound,
            krum_select,
            flame_cluster_threshold,
            flame_noise_lambda,
        },
        summary_window,
        seed,
        partition_alpha: alpha,
        pair_fraction,
        clean_fraction,
        trig_fraction,
        parallel,
        benign_only: false,
    };
    // Safety net for anything not attributed to a single line above.
    config.validate()?;
    Ok(config)
}

/// Parses a configuration document, merged over the documented defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    build_config(&Doc::parse(text)?)
}

/// Parses with the given `(key, value)` pairs replacing whatever the document
/// says. Used by the sweep driver.
pub fn parse_config_with_overrides(
    text: &str,
    overrides: &[(&str, String)],
) -> Result<ExperimentConfig> {
    let mut doc = Doc::parse(text)?;
    doc.apply_overrides(overrides);
    build_config(&doc)
}

/// Renders every key at its default, with doc comments. Parsing this output
/// yields the default configuration.
pub fn render_defaults() -> String {
    let mut out = String::new();
    let mut section = "";
    for key in CONFIG_KEYS {
        let prefix = key.name.split('.').next().unwrap();
        if prefix != section {
            if !section.is_empty() {
                out.push('\n');
            }
            section = prefix;
        }
        out.push_str(&format!("# {}\n{} = {}\n", key.doc, key.name, key.default));
    }
    out
}

/// Which knob a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKey {
    MaliciousRatio,
    LambdaSep,
    LambdaReg,
    AggRule,
}

impl SweepKey {
    pub fn name(&self) -> &'static str {
        match self {
            SweepKey::MaliciousRatio => "malicious_ratio",
            SweepKey::LambdaSep => "attack.lambda_sep",
            SweepKey::LambdaReg => "attack.lambda_reg",
            SweepKey::AggRule => "agg.rule",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "malicious_ratio" => Ok(SweepKey::MaliciousRatio),
            "attack.lambda_sep" => Ok(SweepKey::LambdaSep),
            "attack.lambda_reg" => Ok(SweepKey::LambdaReg),
            "agg.rule" => Ok(SweepKey::AggRule),
            other => Err(SimError::invalid(format!(
                "unsupported sweep key '{other}' \
                 (expected malicious_ratio|attack.lambda_sep|attack.lambda_reg|agg.rule)"
            ))),
        }
    }
}

/// A sweep: one run per (value, seed) pair.
#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub key: SweepKey,
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
}

/// Parses a sweep file with keys `sweep.key`, `sweep.values`, `sweep.seeds`.
pub fn parse_sweep(text: &str) -> Result<SweepSpec> {
    let mut key: Option<(usize, String)> = None;
    let mut values: Option<(usize, String)> = None;
    let mut seeds: Option<(usize, String)> = None;
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = match raw_line.find('#') {
            Some(p) => &raw_line[..p],
            None => raw_line,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        let Some(eq) = stripped.find('=') else {
            return Err(config_err(line, format!("expected 'key = value', got '{stripped}'")));
        };
        let k = stripped[..eq].trim();
        let v = stripped[eq + 1..].trim().to_string();
        let slot = match k {
            "sweep.key" => &mut key,
            "sweep.values" => &mut values,
            "sweep.seeds" => &mut seeds,
            other => {
                return Err(config_err(line, format!("unknown sweep key '{other}'")));
            }
        };
        if slot.is_some() {
            return Err(config_err(line, format!("duplicate key '{k}'")));
        }
        *slot = Some((line, v));
    }

    let (key_line, key_str) =
        key.ok_or_else(|| SimError::ConfigGeneral("sweep.key is required".into()))?;
    let sweep_key = SweepKey::parse(&key_str).map_err(|e| config_err(key_line, e.to_string()))?;

    let (values_line, values_str) =
        values.ok_or_else(|| SimError::ConfigGeneral("sweep.values is required".into()))?;
    let values: Vec<String> = values_str
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if values.is_empty() {
        return Err(config_err(values_line, "sweep.values must be nonempty".to_string()));
    }
    for v in &values {
        match sweep_key {
            SweepKey::MaliciousRatio => {
                let r: f64 = v.parse().map_err(|_| {
                    config_err(values_line, format!("'{v}' is not a ratio"))
                })?;
                if !(0.0..=1.0).contains(&r) {
                    return Err(config_err(
                        values_line,
                        format!("malicious ratio {v} must be in [0, 1]"),
                    ));
                }
            }
            SweepKey::LambdaSep | SweepKey::LambdaReg => {
                let x: f64 = v.parse().map_err(|_| {
                    config_err(values_line, format!("'{v}' is not a number"))
                })?;
                if x < 0.0 {
                    return Err(config_err(values_line, format!("'{v}' must be >= 0")));
                }
            }
            SweepKey::AggRule => {
                AggRule::parse(v).map_err(|e| config_err(values_line, e.to_string()))?;
            }
        }
    }

    let (seeds_line, seeds_str) =
        seeds.ok_or_else(|| SimError::ConfigGeneral("sweep.seeds is required".into()))?;
    let seeds: Vec<u64> = seeds_str
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u64>()
                .map_err(|_| config_err(seeds_line, format!("'{s}' is not a seed")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(config_err(seeds_line, "sweep.seeds must be nonempty".to_string()));
    }

    Ok(SweepSpec {
        key: sweep_key,
        values,
        seeds,
    })
}

/// Translates one sweep value into config overrides against a parsed base.
pub fn sweep_overrides(
    key: SweepKey,
    value: &str,
    base: &ExperimentConfig,
) -> Result<Vec<(&'static str, String)>> {
    match key {
        SweepKey::MaliciousRatio => {
            let ratio: f64 = value
                .parse()
                .map_err(|_| SimError::invalid(format!("'{value}' is not a ratio")))?;
            let count = (ratio * base.num_clients as f64).round() as usize;
            Ok(vec![
                ("fl.malicious_count", count.to_string()),
                ("fl.malicious_ids", String::new()),
            ])
        }
        SweepKey::LambdaSep => Ok(vec![("attack.lambda_sep", value.to_string())]),
        SweepKey::LambdaReg => Ok(vec![("attack.lambda_reg", value.to_string())]),
        SweepKey::AggRule => Ok(vec![("agg.rule", value.to_string())]),
    }
}

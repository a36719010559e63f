//! Synthetic dataset generation, semantic-style triggering, and non-IID
//! client partitioning.
//!
//! Data are class-conditional Gaussians around pseudo-orthogonal class
//! directions. The trigger is an additive attribute shift: a fixed direction
//! plus small per-sample noise, so triggered points stay in-distribution
//! rather than carrying an out-of-distribution patch.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use crate::error::{Result, SimError};
use crate::rng::Rng;

/// Generation parameters for the synthetic classification task.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Per-class sample count, used for the train split and again for the
    /// test split.
    pub samples_per_class: usize,
    pub class_mean_scale: f64,
    pub class_noise_std: f64,
    /// Additive attribute shift applied to triggered samples.
    pub trigger_direction: Vec<f64>,
    pub trigger_noise_std: f64,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(SimError::invalid("num_classes must be >= 2"));
        }
        if self.input_dim < 1 {
            return Err(SimError::invalid("input_dim must be >= 1"));
        }
        if self.samples_per_class < 1 {
            return Err(SimError::invalid("samples_per_class must be >= 1"));
        }
        if self.trigger_direction.len() != self.input_dim {
            return Err(SimError::mismatch(format!(
                "trigger_direction has length {}, expected input_dim {}",
                self.trigger_direction.len(),
                self.input_dim
            )));
        }
        let norm = l2(&self.trigger_direction);
        if norm.is_nan() || norm <= 0.0 {
            return Err(SimError::invalid("trigger_direction must be nonzero"));
        }
        if self.class_noise_std.is_nan() || self.class_noise_std <= 0.0 {
            return Err(SimError::invalid("class_noise_std must be > 0"));
        }
        // trigger_noise_std = 0 is allowed: it makes the trigger an exact
        // deterministic shift.
        if self.trigger_noise_std < 0.0 {
            return Err(SimError::invalid("trigger_noise_std must be >= 0"));
        }
        Ok(())
    }
}

/// One labeled feature vector. `base_id` identifies the underlying sample
/// across clean/triggered views and across dumps.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub base_id: u64,
    pub x: Vec<f64>,
    pub label: usize,
    pub is_triggered: bool,
}

/// Clean/triggered views of the same base sample, with the original label and
/// the backdoor target label.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub base_id: u64,
    pub x_clean: Vec<f64>,
    pub clean_label: usize,
    pub x_trig: Vec<f64>,
    pub trig_label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClientRole {
    Benign,
    Malicious,
    BaselineMalicious,
}

/// The three disjoint subsets a malicious client trains on.
#[derive(Clone, Debug, Default)]
pub struct MaliciousSets {
    pub pair_set: Vec<PairedSample>,
    pub clean_set: Vec<Sample>,
    pub trig_set: Vec<Sample>,
}

/// A client's local data for one experiment.
#[derive(Clone, Debug)]
pub struct ClientDataBundle {
    pub role: ClientRole,
    pub benign_data: Vec<Sample>,
    pub malicious: Option<MaliciousSets>,
}

impl ClientDataBundle {
    pub fn benign(data: Vec<Sample>) -> Self {
        ClientDataBundle {
            role: ClientRole::Benign,
            benign_data: data,
            malicious: None,
        }
    }

    pub fn malicious(role: ClientRole, sets: MaliciousSets) -> Result<Self> {
        if role == ClientRole::Benign {
            return Err(SimError::invalid(
                "malicious bundle requires a malicious role",
            ));
        }
        Ok(ClientDataBundle {
            role,
            benign_data: Vec::new(),
            malicious: Some(sets),
        })
    }

    /// Reported local sample count, which drives the FedAvg weight. Paired
    /// samples count twice (clean view + triggered view).
    pub fn sample_count(&self) -> usize {
        match &self.malicious {
            None => self.benign_data.len(),
            Some(sets) => 2 * sets.pair_set.len() + sets.clean_set.len() + sets.trig_set.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sample_count() == 0
    }

    /// Checks base-id disjointness of the three malicious subsets and target
    /// labels on triggered members.
    pub fn validate(&self, target_label: usize) -> Result<()> {
        let Some(sets) = &self.malicious else {
            return Ok(());
        };
        let mut seen = BTreeSet::new();
        for id in sets
            .pair_set
            .iter()
            .map(|p| p.base_id)
            .chain(sets.clean_set.iter().map(|s| s.base_id))
            .chain(sets.trig_set.iter().map(|s| s.base_id))
        {
            if !seen.insert(id) {
                return Err(SimError::invalid(format!(
                    "malicious subsets share base_id {id}"
                )));
            }
        }
        if sets.pair_set.iter().any(|p| p.trig_label != target_label)
            || sets.trig_set.iter().any(|s| s.label != target_label)
        {
            return Err(SimError::invalid(
                "triggered samples must carry the target label",
            ));
        }
        Ok(())
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// Fixed seeds for the task geometry. Class directions and the trigger unit
// direction are properties of the task, not of an experiment's master seed,
// so sweeping seeds varies training randomness without moving the task.
const CLASS_DIRECTION_SEED: u64 = 0x636c_6173;
const TRIGGER_DIRECTION_SEED: u64 = 0x7472_6967;

/// Deterministic pseudo-orthogonal unit directions, one per class.
/// Gram-Schmidt is applied while the dimension allows it; beyond that the
/// directions are only normalized.
pub fn class_directions(num_classes: usize, input_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(CLASS_DIRECTION_SEED);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while dirs.len() < num_classes {
        let mut v: Vec<f64> = (0..input_dim).map(|_| rng.normal()).collect();
        if dirs.len() < input_dim {
            for u in &dirs {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u) {
                    *vi -= dot * ui;
                }
            }
        }
        let norm = l2(&v);
        if norm < 1e-9 {
            continue;
        }
        for vi in &mut v {
            *vi /= norm;
        }
        dirs.push(v);
    }
    dirs
}

/// Deterministic unit vector used to build the trigger direction from a
/// configured scale.
pub fn trigger_unit_direction(input_dim: usize) -> Vec<f64> {
    let mut rng = Rng::new(TRIGGER_DIRECTION_SEED);
    loop {
        let v: Vec<f64> = (0..input_dim).map(|_| rng.normal()).collect();
        let norm = l2(&v);
        if norm >= 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn gen_split(spec: &DataSpec, dirs: &[Vec<f64>], rng: &mut Rng, first_id: u64) -> Vec<Sample> {
    let mut out = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut base_id = first_id;
    for (label, dir) in dirs.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let x: Vec<f64> = dir
                .iter()
                .map(|&u| spec.class_mean_scale * u + spec.class_noise_std * rng.normal())
                .collect();
            out.push(Sample {
                base_id,
                x,
                label,
                is_triggered: false,
            });
            base_id += 1;
        }
    }
    out
}

/// Generates balanced train and test splits with disjoint base-id ranges.
/// Both splits hold `samples_per_class` samples per class.
pub fn gen_dataset(spec: &DataSpec, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    spec.validate()?;
    let dirs = class_directions(spec.num_classes, spec.input_dim);
    let mut rng = Rng::new(seed);
    let train = gen_split(spec, &dirs, &mut rng, 0);
    let test = gen_split(spec, &dirs, &mut rng, train.len() as u64);
    Ok((train, test))
}

pub(crate) fn apply_trigger_with(sample: &Sample, spec: &DataSpec, rng: &mut Rng) -> Result<Sample> {
    if sample.is_triggered {
        return Err(SimError::invalid(format!(
            "sample {} is already triggered",
            sample.base_id
        )));
    }
    if sample.x.len() != spec.input_dim {
        return Err(SimError::mismatch("sample dimension differs from spec"));
    }
    let x: Vec<f64> = sample
        .x
        .iter()
        .zip(&spec.trigger_direction)
        .map(|(xi, ti)| xi + ti + spec.trigger_noise_std * rng.normal())
        .collect();
    Ok(Sample {
        base_id: sample.base_id,
        x,
        label: sample.label,
        is_triggered: true,
    })
}

/// Adds the trigger shift (plus per-sample noise) to a clean sample. The
/// label is left untouched; relabeling to the target class is the caller's
/// decision.
pub fn apply_trigger(sample: &Sample, spec: &DataSpec, seed: u64) -> Result<Sample> {
    let mut rng = Rng::new(seed);
    apply_trigger_with(sample, spec, &mut rng)
}

fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let remainder = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &idx in order.iter().take(remainder) {
        counts[idx] += 1;
    }
    counts
}

/// Splits the train set across `num_clients` clients, class by class, with
/// Dirichlet(alpha) proportions and largest-remainder rounding. Clients end
/// up with skewed class mixes while the union stays exactly the input.
///
/// Draws where some client receives zero samples overall are rejected and
/// redrawn, up to 100 attempts.
pub fn partition_noniid(
    train: &[Sample],
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<Sample>>> {
    if num_clients < 1 {
        return Err(SimError::invalid("need at least one client"));
    }
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(SimError::invalid("dirichlet alpha must be > 0"));
    }
    if train.is_empty() {
        return Err(SimError::empty("cannot partition an empty train set"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in train.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = Rng::new(seed);
    for _attempt in 0..100 {
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
        for idxs in by_class.values() {
            let props = rng.dirichlet(alpha, num_clients);
            let counts = largest_remainder(&props, idxs.len());
            let mut shuffled = idxs.clone();
            rng.shuffle(&mut shuffled);
            let mut cursor = 0;
            for (client, &count) in counts.iter().enumerate() {
                assigned[client].extend_from_slice(&shuffled[cursor..cursor + count]);
                cursor += count;
            }
        }
        if assigned.iter().all(|a| !a.is_empty()) {
            return Ok(assigned
                .into_iter()
                .map(|idxs| idxs.into_iter().map(|i| train[i].clone()).collect())
                .collect());
        }
    }
    Err(SimError::DataGen(format!(
        "partitioning left a client empty in 100 consecutive draws \
         (clients={num_clients}, alpha={alpha}, train={})",
        train.len()
    )))
}

/// Draws three base-id-disjoint subsets from a malicious client's local data:
/// paired clean/triggered samples, clean-only samples, and trigger-only
/// samples (relabeled to the target class, clean originals discarded).
pub fn build_malicious_sets(
    local: &[Sample],
    n_pair: usize,
    n_clean: usize,
    n_trig: usize,
    target_label: usize,
    spec: &DataSpec,
    seed: u64,
) -> Result<MaliciousSets> {
    let needed = n_pair + n_clean + n_trig;
    if needed > local.len() {
        return Err(SimError::invalid(format!(
            "malicious subsets need {needed} samples but the client holds {}",
            local.len()
        )));
    }
    if target_label >= spec.num_classes {
        return Err(SimError::invalid("target label out of range"));
    }
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..local.len()).collect();
    rng.shuffle(&mut order);

    let mut pair_set = Vec::with_capacity(n_pair);
    for &i in &order[..n_pair] {
        let s = &local[i];
        let trig = apply_trigger_with(s, spec, &mut rng)?;
        pair_set.push(PairedSample {
            base_id: s.base_id,
            x_clean: s.x.clone(),
            clean_label: s.label,
            x_trig: trig.x,
            trig_label: target_label,
        });
    }
    let clean_set: Vec<Sample> = order[n_pair..n_pair + n_clean]
        .iter()
        .map(|&i| local[i].clone())
        .collect();
    let mut trig_set = Vec::with_capacity(n_trig);
    for &i in &order[n_pair + n_clean..needed] {
        let mut trig = apply_trigger_with(&local[i], spec, &mut rng)?;
        trig.label = target_label;
        trig_set.push(trig);
    }
    Ok(MaliciousSets {
        pair_set,
        clean_set,
        trig_set,
    })
}

/// Builds the triggered evaluation set: every test sample whose true label is
/// not the target gets triggered and relabeled; samples already of the target
/// class are excluded so they cannot inflate the attack success rate.
pub fn build_trigger_testset(
    test: &[Sample],
    target_label: usize,
    spec: &DataSpec,
    seed: u64,
) -> Result<Vec<Sample>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for s in test {
        if s.label == target_label {
            continue;
        }
        let mut trig = apply_trigger_with(s, spec, &mut rng)?;
        trig.label = target_label;
        out.push(trig);
    }
    if out.is_empty() {
        return Err(SimError::empty(
            "triggered test set is empty (every test sample has the target label)",
        ));
    }
    Ok(out)
}

/// Writes samples as CSV: `base_id,label,is_triggered,x0,...,x{d-1}`.
/// Feature values use the shortest representation that round-trips.
pub fn write_samples_csv<W: Write>(samples: &[Sample], w: &mut W) -> Result<()> {
    if samples.is_empty() {
        return Err(SimError::empty("no samples to write"));
    }
    let dim = samples[0].x.len();
    let mut header = String::from("base_id,label,is_triggered");
    for j in 0..dim {
        header.push_str(&format!(",x{j}"));
    }
    writeln!(w, "{header}")?;
    for s in samples {
        if s.x.len() != dim {
            return Err(SimError::mismatch("samples have inconsistent dimensions"));
        }
        let mut line = format!("{},{},{}", s.base_id, s.label, u8::from(s.is_triggered));
        for v in &s.x {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads samples from the CSV layout produced by [`write_samples_csv`].
pub fn read_samples_csv<R: BufRead>(r: &mut R) -> Result<Vec<Sample>> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| SimError::empty("csv has no header"))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "base_id" || cols[1] != "label" || cols[2] != "is_triggered" {
        return Err(SimError::invalid("unrecognized sample csv header"));
    }
    let dim = cols.len() - 3;
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(SimError::invalid(format!(
                "row {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                dim + 3
            )));
        }
        let parse_err = |what: &str| {
            SimError::invalid(format!("row {}: cannot parse {what}", lineno + 2))
        };
        let base_id: u64 = fields[0].parse().map_err(|_| parse_err("base_id"))?;
        let label: usize = fields[1].parse().map_err(|_| parse_err("label"))?;
        let trig: u8 = fields[2].parse().map_err(|_| parse_err("is_triggered"))?;
        let mut x = Vec::with_capacity(dim);
        for f in &fields[3..] {
            x.push(f.parse::<f64>().map_err(|_| parse_err("feature"))?);
        }
        out.push(Sample {
            base_id,
            x,
            label,
            is_triggered: trig != 0,
        });
    }
    Ok(out)
}

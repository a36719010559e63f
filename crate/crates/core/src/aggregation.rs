//! Server-side aggregation rules: FedAvg plus four robust alternatives.
//!
//! Every rule canonicalizes its input by ascending client id before any
//! floating-point reduction, so the output is bit-identical under any
//! permutation of the update list and under concurrent client execution.
//!
//! `flame_lite` is a deliberately simplified relative of FLAME: single-linkage
//! cosine clustering of update deltas, norm clipping to the median, additive
//! Gaussian noise. It is labeled `flame_lite` everywhere and never presented
//! as the published algorithm.

use std::collections::BTreeSet;

use crate::error::{Result, SimError};
use crate::model::ParameterVector;
use crate::rng::Rng;

/// One client's contribution to a round.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParameterVector,
    pub num_samples: usize,
}

/// Which rule the server runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggRule {
    FedAvg,
    Median,
    TrimmedMean,
    MultiKrum,
    FlameLite,
}

impl AggRule {
    pub fn name(&self) -> &'static str {
        match self {
            AggRule::FedAvg => "fedavg",
            AggRule::Median => "median",
            AggRule::TrimmedMean => "trimmed_mean",
            AggRule::MultiKrum => "multikrum",
            AggRule::FlameLite => "flame_lite",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(AggRule::FedAvg),
            "median" => Ok(AggRule::Median),
            "trimmed_mean" => Ok(AggRule::TrimmedMean),
            "multikrum" => Ok(AggRule::MultiKrum),
            "flame_lite" => Ok(AggRule::FlameLite),
            other => Err(SimError::invalid(format!(
                "unknown aggregation rule '{other}' \
                 (expected fedavg|median|trimmed_mean|multikrum|flame_lite)"
            ))),
        }
    }
}

/// Rule selection plus every rule-specific knob.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AggConfig {
    pub rule: AggRule,
    /// Trimmed mean: fraction discarded at each end.
    pub trim_fraction: f64,
    /// MultiKrum: assumed Byzantine count f.
    pub byz_bound: usize,
    /// MultiKrum: number of updates averaged, m.
    pub krum_select: usize,
    /// flame_lite: cosine-distance cut for the single-linkage clustering.
    pub flame_cluster_threshold: f64,
    /// flame_lite: noise std multiplier (std = lambda * median kept norm).
    pub flame_noise_lambda: f64,
}

impl AggConfig {
    /// Validates the knobs of the selected rule against a population of
    /// `num_clients` updates.
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        match self.rule {
            AggRule::FedAvg | AggRule::Median => Ok(()),
            AggRule::TrimmedMean => {
                if !(0.0..0.5).contains(&self.trim_fraction) {
                    return Err(SimError::invalid("trim_fraction must be in [0, 0.5)"));
                }
                let t = (self.trim_fraction * num_clients as f64).floor() as usize;
                if num_clients < 2 * t + 1 {
                    return Err(SimError::invalid(format!(
                        "trimmed_mean discards all {num_clients} updates at trim_fraction {}",
                        self.trim_fraction
                    )));
                }
                Ok(())
            }
            AggRule::MultiKrum => {
                if num_clients < self.byz_bound + 3 {
                    return Err(SimError::invalid(format!(
                        "multikrum needs n >= f + 3 (n = {num_clients}, f = {})",
                        self.byz_bound
                    )));
                }
                if self.krum_select < 1 || self.krum_select > num_clients {
                    return Err(SimError::invalid(format!(
                        "multikrum selection m = {} must be in [1, {num_clients}]",
                        self.krum_select
                    )));
                }
                Ok(())
            }
            AggRule::FlameLite => {
                let t = self.flame_cluster_threshold;
                if t.is_nan() || t <= 0.0 || t > 2.0 {
                    return Err(SimError::invalid(
                        "flame cluster threshold must be in (0, 2]",
                    ));
                }
                if self.flame_noise_lambda.is_nan() || self.flame_noise_lambda < 0.0 {
                    return Err(SimError::invalid("flame noise lambda must be >= 0"));
                }
                Ok(())
            }
        }
    }
}

/// Aggregation output: the new global parameters plus rule diagnostics.
#[derive(Clone, Debug)]
pub struct AggOutcome {
    pub params: ParameterVector,
    /// Client ids kept by a selecting rule (multikrum, flame_lite).
    pub selected: Option<Vec<usize>>,
    /// Per-client scores, ascending client id (multikrum only).
    pub scores: Option<Vec<(usize, f64)>>,
}

/// multikrum output: averaged parameters, the selected client ids, and every
/// client's score.
#[derive(Clone, Debug)]
pub struct MultiKrumOutcome {
    pub params: ParameterVector,
    pub selected: Vec<usize>,
    pub scores: Vec<(usize, f64)>,
}

/// Sorts references by client id and validates shared invariants: nonempty
/// list, unique ids, equal finite parameter vectors, positive sample counts.
fn canonicalize(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    if updates.is_empty() {
        return Err(SimError::empty("no client updates to aggregate"));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let len = sorted[0].params.len();
    let mut ids = BTreeSet::new();
    for u in &sorted {
        if !ids.insert(u.client_id) {
            return Err(SimError::Aggregation(format!(
                "duplicate client id {}",
                u.client_id
            )));
        }
        if u.params.len() != len {
            return Err(SimError::Aggregation(format!(
                "client {} sent {} parameters, expected {len}",
                u.client_id,
                u.params.len()
            )));
        }
        if !u.params.is_finite() {
            return Err(SimError::Aggregation(format!(
                "client {} sent non-finite parameters",
                u.client_id
            )));
        }
        if u.num_samples == 0 {
            return Err(SimError::Aggregation(format!(
                "client {} reports zero samples",
                u.client_id
            )));
        }
    }
    Ok(sorted)
}

/// Sample-count weighted average (Federated Averaging).
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ParameterVector> {
    let sorted = canonicalize(updates)?;
    let total: usize = sorted.iter().map(|u| u.num_samples).sum();
    let len = sorted[0].params.len();
    let mut out = vec![0.0; len];
    for u in &sorted {
        let w = u.num_samples as f64 / total as f64;
        for (o, p) in out.iter_mut().zip(u.params.values()) {
            *o += w * p;
        }
    }
    Ok(ParameterVector::from_values(out))
}

fn sorted_coord_values(sorted: &[&ClientUpdate], coord: usize) -> Vec<f64> {
    let mut vals: Vec<f64> = sorted.iter().map(|u| u.params.values()[coord]).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals
}

/// Coordinate-wise median, unweighted. Even counts take the mean of the two
/// middle order statistics.
pub fn coord_median(updates: &[ClientUpdate]) -> Result<ParameterVector> {
    let sorted = canonicalize(updates)?;
    let n = sorted.len();
    let len = sorted[0].params.len();
    let mut out = vec![0.0; len];
    for (coord, o) in out.iter_mut().enumerate() {
        let vals = sorted_coord_values(&sorted, coord);
        *o = if n % 2 == 1 {
            vals[n / 2]
        } else {
            (vals[n / 2 - 1] + vals[n / 2]) / 2.0
        };
    }
    Ok(ParameterVector::from_values(out))
}

/// Coordinate-wise trimmed mean, unweighted: drop the `floor(beta * n)`
/// smallest and largest values per coordinate, average the rest.
pub fn trimmed_mean(updates: &[ClientUpdate], beta: f64) -> Result<ParameterVector> {
    if !(0.0..0.5).contains(&beta) {
        return Err(SimError::invalid("trim fraction must be in [0, 0.5)"));
    }
    let sorted = canonicalize(updates)?;
    let n = sorted.len();
    let t = (beta * n as f64).floor() as usize;
    if n < 2 * t + 1 {
        return Err(SimError::Aggregation(format!(
            "trimming {t} from each end of {n} updates leaves nothing"
        )));
    }
    let keep = (n - 2 * t) as f64;
    let len = sorted[0].params.len();
    let mut out = vec![0.0; len];
    for (coord, o) in out.iter_mut().enumerate() {
        let vals = sorted_coord_values(&sorted, coord);
        let mut sum = 0.0;
        for v in &vals[t..n - t] {
            sum += v;
        }
        *o = sum / keep;
    }
    Ok(ParameterVector::from_values(out))
}

fn squared_distance(a: &ParameterVector, b: &ParameterVector) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// MultiKrum: score every update by the sum of its `n - f - 2` smallest
/// squared distances to the others, keep the `m` lowest-scoring updates
/// (ties broken by lower client id), and return their unweighted mean.
pub fn multikrum(updates: &[ClientUpdate], f: usize, m: usize) -> Result<MultiKrumOutcome> {
    let sorted = canonicalize(updates)?;
    let n = sorted.len();
    if n < f + 3 {
        return Err(SimError::Aggregation(format!(
            "multikrum needs n >= f + 3 (n = {n}, f = {f})"
        )));
    }
    if m < 1 || m > n {
        return Err(SimError::Aggregation(format!(
            "multikrum selection m = {m} must be in [1, {n}]"
        )));
    }
    let closest = n - f - 2;

    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = squared_distance(&sorted[i].params, &sorted[j].params);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    let mut scores: Vec<(usize, f64)> = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
        others.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut score = 0.0;
        for d in &others[..closest] {
            score += d;
        }
        scores.push((sorted[i].client_id, score));
    }

    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| {
        scores[a]
            .1
            .partial_cmp(&scores[b].1)
            .unwrap()
            .then(scores[a].0.cmp(&scores[b].0))
    });
    let mut chosen: Vec<usize> = ranked[..m].to_vec();
    chosen.sort_by_key(|&i| sorted[i].client_id);

    let len = sorted[0].params.len();
    let mut out = vec![0.0; len];
    for &i in &chosen {
        for (o, p) in out.iter_mut().zip(sorted[i].params.values()) {
            *o += p;
        }
    }
    for o in &mut out {
        *o /= m as f64;
    }

    Ok(MultiKrumOutcome {
        params: ParameterVector::from_values(out),
        selected: chosen.iter().map(|&i| sorted[i].client_id).collect(),
        scores,
    })
}

/// flame_lite output: new global parameters plus the kept client ids.
#[derive(Clone, Debug)]
pub struct FlameOutcome {
    pub params: ParameterVector,
    pub kept: Vec<usize>,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

fn median_of(vals: &mut [f64]) -> f64 {
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        (vals[n / 2 - 1] + vals[n / 2]) / 2.0
    }
}

/// Clustering-based filtering with norm clipping and additive noise:
///
/// 1. form deltas from the current global model;
/// 2. single-linkage clusters over pairwise cosine distances, cutting links
///    above the threshold, keeping the largest cluster (ties: the cluster
///    holding the lowest client id);
/// 3. clip kept deltas to the median kept norm, average them, add isotropic
///    Gaussian noise with per-coordinate std `lambda * median_norm`;
/// 4. return `global + result`.
pub fn flame_lite(
    updates: &[ClientUpdate],
    global: &ParameterVector,
    cluster_threshold: f64,
    noise_lambda: f64,
    noise_seed: u64,
) -> Result<FlameOutcome> {
    if cluster_threshold.is_nan() || cluster_threshold <= 0.0 || cluster_threshold > 2.0 {
        return Err(SimError::invalid("flame cluster threshold must be in (0, 2]"));
    }
    if noise_lambda.is_nan() || noise_lambda < 0.0 {
        return Err(SimError::invalid("flame noise lambda must be >= 0"));
    }
    let sorted = canonicalize(updates)?;
    let n = sorted.len();
    let len = sorted[0].params.len();
    if global.len() != len {
        return Err(SimError::Aggregation(format!(
            "global model has {} parameters, updates have {len}",
            global.len()
        )));
    }

    let deltas: Vec<Vec<f64>> = sorted
        .iter()
        .map(|u| {
            u.params
                .values()
                .iter()
                .zip(global.values())
                .map(|(p, g)| p - g)
                .collect()
        })
        .collect();

    // Connected components of the graph whose edges are cosine distances
    // within the threshold (single linkage cut).
    let mut component: Vec<usize> = (0..n).collect();
    fn root(component: &mut [usize], mut i: usize) -> usize {
        while component[i] != i {
            component[i] = component[component[i]];
            i = component[i];
        }
        i
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if cosine_distance(&deltas[i], &deltas[j]) <= cluster_threshold {
                let (ri, rj) = (root(&mut component, i), root(&mut component, j));
                if ri != rj {
                    let (lo, hi) = (ri.min(rj), ri.max(rj));
                    component[hi] = lo;
                }
            }
        }
    }
    let mut cluster_members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = root(&mut component, i);
        cluster_members[r].push(i);
    }
    // Largest cluster; ties resolved toward the cluster containing the lowest
    // client id, i.e. the lowest index in canonical order.
    let kept_members = cluster_members
        .iter()
        .filter(|c| !c.is_empty())
        .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
        .expect("at least one cluster")
        .clone();

    let mut norms: Vec<f64> = kept_members
        .iter()
        .map(|&i| deltas[i].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let clip = median_of(&mut norms);

    let mut mean = vec![0.0; len];
    for &i in &kept_members {
        let norm = deltas[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        for (o, d) in mean.iter_mut().zip(&deltas[i]) {
            *o += scale * d;
        }
    }
    let inv = 1.0 / kept_members.len() as f64;
    for o in &mut mean {
        *o *= inv;
    }

    if noise_lambda > 0.0 {
        let mut rng = Rng::new(noise_seed);
        let std = noise_lambda * clip;
        for o in &mut mean {
            *o += std * rng.normal();
        }
    }

    let out: Vec<f64> = global.values().iter().zip(&mean).map(|(g, m)| g + m).collect();
    Ok(FlameOutcome {
        params: ParameterVector::from_values(out),
        kept: kept_members.iter().map(|&i| sorted[i].client_id).collect(),
    })
}

/// Runs the configured rule. `noise_seed` only matters for `flame_lite`.
pub fn aggregate(
    updates: &[ClientUpdate],
    global: &ParameterVector,
    cfg: &AggConfig,
    noise_seed: u64,
) -> Result<AggOutcome> {
    // Protocol conformance: every update must be a parameter vector of the
    // exact model length.
    for u in updates {
        if u.params.len() != global.len() {
            return Err(SimError::Aggregation(format!(
                "client {} sent {} parameters, model has {}",
                u.client_id,
                u.params.len(),
                global.len()
            )));
        }
    }
    match cfg.rule {
        AggRule::FedAvg => Ok(AggOutcome {
            params: fedavg(updates)?,
            selected: None,
            scores: None,
        }),
        AggRule::Median => Ok(AggOutcome {
            params: coord_median(updates)?,
            selected: None,
            scores: None,
        }),
        AggRule::TrimmedMean => Ok(AggOutcome {
            params: trimmed_mean(updates, cfg.trim_fraction)?,
            selected: None,
            scores: None,
        }),
        AggRule::MultiKrum => {
            let out = multikrum(updates, cfg.byz_bound, cfg.krum_select)?;
            Ok(AggOutcome {
                params: out.params,
                selected: Some(out.selected),
                scores: Some(out.scores),
            })
        }
        AggRule::FlameLite => {
            let out = flame_lite(
                updates,
                global,
                cfg.flame_cluster_threshold,
                cfg.flame_noise_lambda,
                noise_seed,
            )?;
            Ok(AggOutcome {
                params: out.params,
                selected: Some(out.kept),
                scores: None,
            })
        }
    }
}

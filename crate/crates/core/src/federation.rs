//! Synchronous federated training loop.
//!
//! Every round, all clients initialize from the broadcast global model, run
//! their role's local update (benign CE, the full malicious objective, or the
//! naive mixed-data baseline), and the server aggregates with the configured
//! rule. Per-client seeds are derived from (master seed, round, client id),
//! so concurrent and sequential execution produce bit-identical runs.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;

use crate::aggregation::{aggregate, AggConfig, ClientUpdate};
use crate::attack::{
    apply_mask, importance_mask, malicious_loss_and_grad, MaliciousHyper, MaliciousTerms,
};
use crate::data::{
    build_malicious_sets, build_trigger_testset, gen_dataset, partition_noniid, ClientDataBundle,
    ClientRole, DataSpec, MaliciousSets, Sample,
};
use crate::error::{Result, SimError};
use crate::fmt::fmt_f64;
use crate::model::{
    forward, grad_batch_ce, init_model, sgd_step, ModelDims, OptimizerState, ParameterVector,
    SgdConfig,
};
use crate::rng::{derive_seed, domain, Rng};

/// What malicious clients do. With `None` the malicious id set is ignored and
/// every client trains benignly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackMode {
    None,
    Sable,
    Baseline,
}

impl AttackMode {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMode::None => "none",
            AttackMode::Sable => "sable",
            AttackMode::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackMode::None),
            "sable" => Ok(AttackMode::Sable),
            "baseline" => Ok(AttackMode::Baseline),
            other => Err(SimError::invalid(format!(
                "unknown attack mode '{other}' (expected none|sable|baseline)"
            ))),
        }
    }
}

/// Full description of one experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub dims: ModelDims,
    pub data: DataSpec,
    pub num_clients: usize,
    pub malicious_ids: BTreeSet<usize>,
    pub attack_mode: AttackMode,
    pub hyper: MaliciousHyper,
    pub opt: SgdConfig,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub agg: AggConfig,
    pub summary_window: usize,
    pub seed: u64,
    /// Dirichlet concentration of the non-IID partition.
    pub partition_alpha: f64,
    /// Fractions of a malicious client's local data converted into the
    /// paired / clean-only / trigger-only subsets.
    pub pair_fraction: f64,
    pub clean_fraction: f64,
    pub trig_fraction: f64,
    /// Run client updates concurrently. Results are identical either way.
    pub parallel: bool,
    /// Drop malicious clients entirely (benign-reference runs).
    pub benign_only: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.data.validate()?;
        if self.dims.input_dim != self.data.input_dim
            || self.dims.num_classes != self.data.num_classes
        {
            return Err(SimError::invalid(
                "model dims and data spec disagree on input_dim or num_classes",
            ));
        }
        if self.num_clients < 1 {
            return Err(SimError::invalid("need at least one client"));
        }
        if let Some(&bad) = self.malicious_ids.iter().find(|&&id| id >= self.num_clients) {
            return Err(SimError::invalid(format!(
                "malicious client id {bad} out of range (clients = {})",
                self.num_clients
            )));
        }
        if self.local_epochs < 1 {
            return Err(SimError::invalid("local_epochs must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(SimError::invalid("batch_size must be >= 1"));
        }
        if self.rounds < 1 {
            return Err(SimError::invalid("rounds must be >= 1"));
        }
        if self.summary_window < 1 || self.summary_window > self.rounds {
            return Err(SimError::invalid(
                "summary_window must be in [1, rounds]",
            ));
        }
        if self.partition_alpha.is_nan() || self.partition_alpha <= 0.0 {
            return Err(SimError::invalid("partition alpha must be > 0"));
        }
        for (name, frac) in [
            ("pair_fraction", self.pair_fraction),
            ("clean_fraction", self.clean_fraction),
            ("trig_fraction", self.trig_fraction),
        ] {
            if !(0.0..=1.0).contains(&frac) {
                return Err(SimError::invalid(format!("{name} must be in [0, 1]")));
            }
        }
        if self.pair_fraction + self.clean_fraction + self.trig_fraction > 1.0 + 1e-12 {
            return Err(SimError::invalid(
                "pair/clean/trig fractions must sum to at most 1",
            ));
        }
        self.hyper.validate(self.dims.num_classes)?;
        self.opt.validate()?;
        self.agg.validate(self.participating_clients())?;
        Ok(())
    }

    /// Number of clients that actually train: all of them, or the benign
    /// remainder in benign-only mode.
    pub fn participating_clients(&self) -> usize {
        if self.benign_only {
            self.num_clients - self.malicious_ids.len()
        } else {
            self.num_clients
        }
    }
}

/// Per-round observables.
#[derive(Clone, Debug)]
pub struct RoundMetrics {
    pub round: usize,
    pub clean_accuracy: f64,
    pub asr: f64,
    /// Client ids kept by a selecting rule, ascending.
    pub selected: Option<Vec<usize>>,
    /// Per-client multikrum scores, ascending client id.
    pub scores: Option<Vec<(usize, f64)>>,
    /// Mean malicious loss components across malicious clients.
    pub malicious_terms: Option<MaliciousTerms>,
}

/// Mean and sample standard deviation over the final window of rounds.
#[derive(Clone, Copy, Debug)]
pub struct Summary {
    pub clean_acc_mean: f64,
    pub clean_acc_std: f64,
    pub asr_mean: f64,
    pub asr_std: f64,
    pub window: usize,
}

/// Plain CE mini-batch training: the benign local update, also reused by the
/// baseline attack on its flattened mixed data.
fn train_plain_ce(
    global: &ParameterVector,
    dims: &ModelDims,
    data: &[Sample],
    opt: SgdConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ParameterVector> {
    if data.is_empty() {
        return Err(SimError::empty("local update needs nonempty data"));
    }
    let mut params = global.clone();
    let mut state = OptimizerState::new(opt, params.len())?;
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&i| (data[i].x.as_slice(), data[i].label))
                .collect();
            let (_, grad) = grad_batch_ce(&params, dims, &batch)?;
            let (next, next_state) = sgd_step(&params, &grad, &state)?;
            params = next;
            state = next_state;
        }
    }
    Ok(params)
}

/// Benign local update: `epochs` passes of shuffled mini-batch SGD on the
/// mean cross-entropy, starting from the broadcast global model with a fresh
/// momentum buffer.
pub fn local_update_benign(
    global: &ParameterVector,
    dims: &ModelDims,
    data: &[Sample],
    opt: SgdConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ParameterVector> {
    train_plain_ce(global, dims, data, opt, epochs, batch_size, seed)
}

/// Result of a malicious local update: the parameters plus the mean loss
/// components over all optimization steps (diagnostics).
#[derive(Clone, Debug)]
pub struct MaliciousUpdate {
    pub params: ParameterVector,
    pub mean_terms: MaliciousTerms,
}

/// Malicious local update. Mini-batches are drawn from the shuffled
/// concatenation of the pair, clean-only, and trigger-only subsets and split
/// back by provenance; each step optimizes the full malicious objective, with
/// the separation term active only when the batch contains pairs.
///
/// When `mask_fraction > 0`, an importance mask is recomputed at each epoch
/// start from the gradient of one clean batch (the first `batch_size` clean
/// samples, falling back to the pairs' clean views) and applied to every
/// gradient of that epoch.
#[allow(clippy::too_many_arguments)]
pub fn local_update_malicious(
    global: &ParameterVector,
    dims: &ModelDims,
    sets: &MaliciousSets,
    hyper: &MaliciousHyper,
    opt: SgdConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<MaliciousUpdate> {
    let n_pair = sets.pair_set.len();
    let n_clean = sets.clean_set.len();
    let n_trig = sets.trig_set.len();
    let total = n_pair + n_clean + n_trig;
    if total == 0 {
        return Err(SimError::empty("malicious bundle has no data"));
    }
    let mut params = global.clone();
    let mut state = OptimizerState::new(opt, params.len())?;
    let mut rng = Rng::new(seed);
    let mut order: Vec<usize> = (0..total).collect();
    let mut term_sum = MaliciousTerms::default();
    let mut steps = 0usize;

    for _ in 0..epochs {
        rng.shuffle(&mut order);

        let mask: Option<Vec<bool>> = if hyper.mask_fraction > 0.0 {
            let clean_pool: Vec<(&[f64], usize)> = if !sets.clean_set.is_empty() {
                sets.clean_set
                    .iter()
                    .take(batch_size)
                    .map(|s| (s.x.as_slice(), s.label))
                    .collect()
            } else {
                sets.pair_set
                    .iter()
                    .take(batch_size)
                    .map(|p| (p.x_clean.as_slice(), p.clean_label))
                    .collect()
            };
            let clean_grad = if clean_pool.is_empty() {
                ParameterVector::zeros(params.len())
            } else {
                grad_batch_ce(&params, dims, &clean_pool)?.1
            };
            Some(importance_mask(&clean_grad, hyper.mask_fraction)?)
        } else {
            None
        };

        for chunk in order.chunks(batch_size) {
            let mut b_pair = Vec::new();
            let mut b_clean = Vec::new();
            let mut b_trig = Vec::new();
            for &i in chunk {
                if i < n_pair {
                    b_pair.push(&sets.pair_set[i]);
                } else if i < n_pair + n_clean {
                    b_clean.push(&sets.clean_set[i - n_pair]);
                } else {
                    b_trig.push(&sets.trig_set[i - n_pair - n_clean]);
                }
            }
            let (_, grad, terms) =
                malicious_loss_and_grad(&params, dims, &b_pair, &b_clean, &b_trig, global, hyper)?;
            let grad = match &mask {
                Some(m) => apply_mask(&grad, m)?,
                None => grad,
            };
            let (next, next_state) = sgd_step(&params, &grad, &state)?;
            params = next;
            state = next_state;
            term_sum.ce_pair += terms.ce_pair;
            term_sum.ce_clean += terms.ce_clean;
            term_sum.ce_trig += terms.ce_trig;
            term_sum.sep += terms.sep;
            term_sum.reg += terms.reg;
            steps += 1;
        }
    }
    let inv = 1.0 / steps as f64;
    Ok(MaliciousUpdate {
        params,
        mean_terms: MaliciousTerms {
            ce_pair: term_sum.ce_pair * inv,
            ce_clean: term_sum.ce_clean * inv,
            ce_trig: term_sum.ce_trig * inv,
            sep: term_sum.sep * inv,
            reg: term_sum.reg * inv,
        },
    })
}

/// Naive backdoor baseline: plain CE training on the union of all clean
/// views (original labels) and all triggered views (target label), with no
/// extra loss terms and no update scaling.
///
/// Flattening order: pair clean views, clean-only set, pair triggered views,
/// trigger-only set.
#[allow(clippy::too_many_arguments)]
pub fn local_update_baseline(
    global: &ParameterVector,
    dims: &ModelDims,
    sets: &MaliciousSets,
    target_label: usize,
    opt: SgdConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<ParameterVector> {
    let mut flat: Vec<Sample> =
        Vec::with_capacity(2 * sets.pair_set.len() + sets.clean_set.len() + sets.trig_set.len());
    for p in &sets.pair_set {
        flat.push(Sample {
            base_id: p.base_id,
            x: p.x_clean.clone(),
            label: p.clean_label,
            is_triggered: false,
        });
    }
    flat.extend(sets.clean_set.iter().cloned());
    for p in &sets.pair_set {
        flat.push(Sample {
            base_id: p.base_id,
            x: p.x_trig.clone(),
            label: target_label,
            is_triggered: true,
        });
    }
    flat.extend(sets.trig_set.iter().cloned());
    train_plain_ce(global, dims, &flat, opt, epochs, batch_size, seed)
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Clean accuracy on the untriggered test set and attack success rate on the
/// triggered one. Argmax ties resolve to the lowest class index.
pub fn evaluate(
    params: &ParameterVector,
    dims: &ModelDims,
    clean_test: &[Sample],
    trig_test: &[Sample],
    target_label: usize,
) -> Result<(f64, f64)> {
    if clean_test.is_empty() || trig_test.is_empty() {
        return Err(SimError::empty("evaluation needs nonempty test sets"));
    }
    let mut correct = 0usize;
    for s in clean_test {
        let fr = forward(params, dims, &s.x)?;
        if argmax_lowest(&fr.logits) == s.label {
            correct += 1;
        }
    }
    let mut hits = 0usize;
    for s in trig_test {
        let fr = forward(params, dims, &s.x)?;
        if argmax_lowest(&fr.logits) == target_label {
            hits += 1;
        }
    }
    Ok((
        correct as f64 / clean_test.len() as f64,
        hits as f64 / trig_test.len() as f64,
    ))
}

struct ClientState {
    id: usize,
    bundle: ClientDataBundle,
}

/// Live state of a running experiment: global model, client data, test sets.
pub struct FederationState {
    config: ExperimentConfig,
    global: ParameterVector,
    clients: Vec<ClientState>,
    clean_test: Vec<Sample>,
    trig_test: Vec<Sample>,
    round: usize,
}

/// Turns a fraction of the local dataset into a subset size: `ceil` so that a
/// positive fraction never silently becomes an empty subset, clamped to what
/// remains available.
fn fraction_count(frac: f64, local: usize, available: usize) -> usize {
    ((frac * local as f64).ceil() as usize).min(available)
}

impl FederationState {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data_seed = derive_seed(config.seed, &[domain::DATASET]);
        let (train, test) = gen_dataset(&config.data, data_seed)?;
        let part_seed = derive_seed(config.seed, &[domain::PARTITION]);
        let parts = partition_noniid(&train, config.num_clients, config.partition_alpha, part_seed)?;
        let trig_seed = derive_seed(config.seed, &[domain::TRIGGER_TEST]);
        let trig_test =
            build_trigger_testset(&test, config.hyper.target_label, &config.data, trig_seed)?;

        let mut clients = Vec::new();
        for (id, local) in parts.into_iter().enumerate() {
            let listed_malicious = config.malicious_ids.contains(&id);
            if config.benign_only && listed_malicious {
                continue;
            }
            let is_attacking = listed_malicious
                && !config.benign_only
                && config.attack_mode != AttackMode::None;
            let bundle = if is_attacking {
                let n = local.len();
                let n_pair = fraction_count(config.pair_fraction, n, n);
                let n_clean = fraction_count(config.clean_fraction, n, n - n_pair);
                let n_trig = fraction_count(config.trig_fraction, n, n - n_pair - n_clean);
                let sets_seed = derive_seed(config.seed, &[domain::MALICIOUS_SETS, id as u64]);
                let sets = build_malicious_sets(
                    &local,
                    n_pair,
                    n_clean,
                    n_trig,
                    config.hyper.target_label,
                    &config.data,
                    sets_seed,
                )?;
                let role = match config.attack_mode {
                    AttackMode::Sable => ClientRole::Malicious,
                    AttackMode::Baseline => ClientRole::BaselineMalicious,
                    AttackMode::None => unreachable!(),
                };
                let bundle = ClientDataBundle::malicious(role, sets)?;
                bundle.validate(config.hyper.target_label)?;
                bundle
            } else {
                ClientDataBundle::benign(local)
            };
            if bundle.is_empty() {
                return Err(SimError::DataGen(format!(
                    "client {id} has no training data (check subset fractions)"
                )));
            }
            clients.push(ClientState { id, bundle });
        }

        let model_seed = derive_seed(config.seed, &[domain::MODEL_INIT]);
        let global = init_model(&config.dims, model_seed);
        Ok(FederationState {
            config,
            global,
            clients,
            clean_test: test,
            trig_test,
            round: 0,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn global(&self) -> &ParameterVector {
        &self.global
    }

    pub fn clean_test(&self) -> &[Sample] {
        &self.clean_test
    }

    pub fn trig_test(&self) -> &[Sample] {
        &self.trig_test
    }

    pub fn round(&self) -> usize {
        self.round
    }

    fn client_update(&self, cs: &ClientState) -> Result<(ClientUpdate, Option<MaliciousTerms>)> {
        let cfg = &self.config;
        let seed = derive_seed(
            cfg.seed,
            &[domain::CLIENT_ROUND, self.round as u64, cs.id as u64],
        );
        let (params, terms) = match (&cs.bundle.role, &cs.bundle.malicious) {
            (ClientRole::Benign, _) | (_, None) => (
                local_update_benign(
                    &self.global,
                    &cfg.dims,
                    &cs.bundle.benign_data,
                    cfg.opt,
                    cfg.local_epochs,
                    cfg.batch_size,
                    seed,
                )?,
                None,
            ),
            (ClientRole::Malicious, Some(sets)) => {
                let update = local_update_malicious(
                    &self.global,
                    &cfg.dims,
                    sets,
                    &cfg.hyper,
                    cfg.opt,
                    cfg.local_epochs,
                    cfg.batch_size,
                    seed,
                )?;
                (update.params, Some(update.mean_terms))
            }
            (ClientRole::BaselineMalicious, Some(sets)) => (
                local_update_baseline(
                    &self.global,
                    &cfg.dims,
                    sets,
                    cfg.hyper.target_label,
                    cfg.opt,
                    cfg.local_epochs,
                    cfg.batch_size,
                    seed,
                )?,
                None,
            ),
        };
        Ok((
            ClientUpdate {
                client_id: cs.id,
                params,
                num_samples: cs.bundle.sample_count(),
            },
            terms,
        ))
    }

    /// Runs one synchronous round: all clients update locally, the server
    /// aggregates, and the new global model is evaluated.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let results: Vec<(ClientUpdate, Option<MaliciousTerms>)> = if self.config.parallel {
            self.clients
                .par_iter()
                .map(|cs| self.client_update(cs))
                .collect::<Result<_>>()?
        } else {
            self.clients
                .iter()
                .map(|cs| self.client_update(cs))
                .collect::<Result<_>>()?
        };

        let mut updates = Vec::with_capacity(results.len());
        let mut term_sum = MaliciousTerms::default();
        let mut term_count = 0usize;
        for (update, terms) in results {
            if let Some(t) = terms {
                term_sum.ce_pair += t.ce_pair;
                term_sum.ce_clean += t.ce_clean;
                term_sum.ce_trig += t.ce_trig;
                term_sum.sep += t.sep;
                term_sum.reg += t.reg;
                term_count += 1;
            }
            updates.push(update);
        }

        let noise_seed = derive_seed(self.config.seed, &[domain::AGG_NOISE, self.round as u64]);
        let outcome = aggregate(&updates, &self.global, &self.config.agg, noise_seed)?;
        self.global = outcome.params;

        let (clean_accuracy, asr) = evaluate(
            &self.global,
            &self.config.dims,
            &self.clean_test,
            &self.trig_test,
            self.config.hyper.target_label,
        )?;

        let malicious_terms = if term_count > 0 {
            let inv = 1.0 / term_count as f64;
            Some(MaliciousTerms {
                ce_pair: term_sum.ce_pair * inv,
                ce_clean: term_sum.ce_clean * inv,
                ce_trig: term_sum.ce_trig * inv,
                sep: term_sum.sep * inv,
                reg: term_sum.reg * inv,
            })
        } else {
            None
        };

        let metrics = RoundMetrics {
            round: self.round,
            clean_accuracy,
            asr,
            selected: outcome.selected,
            scores: outcome.scores,
            malicious_terms,
        };
        self.round += 1;
        Ok(metrics)
    }
}

/// A finished experiment: the per-round series, the tail summary, and the
/// final state (for embedding exports and inspection).
pub struct ExperimentRun {
    pub metrics: Vec<RoundMetrics>,
    pub summary: Summary,
    pub state: FederationState,
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

/// Mean and sample standard deviation (denominator `window - 1`; a window of
/// one reports std 0) of accuracy and ASR over the final rounds.
pub fn summarize(metrics: &[RoundMetrics], window: usize) -> Summary {
    let window = window.min(metrics.len()).max(1);
    let tail = &metrics[metrics.len() - window..];
    let accs: Vec<f64> = tail.iter().map(|m| m.clean_accuracy).collect();
    let asrs: Vec<f64> = tail.iter().map(|m| m.asr).collect();
    let (clean_acc_mean, clean_acc_std) = mean_std(&accs);
    let (asr_mean, asr_std) = mean_std(&asrs);
    Summary {
        clean_acc_mean,
        clean_acc_std,
        asr_mean,
        asr_std,
        window,
    }
}

/// Builds the data, runs all configured rounds, and summarizes the tail.
pub fn run_experiment(config: ExperimentConfig) -> Result<ExperimentRun> {
    let rounds = config.rounds;
    let window = config.summary_window;
    let mut state = FederationState::new(config)?;
    let mut metrics = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        metrics.push(state.run_round()?);
    }
    let summary = summarize(&metrics, window);
    Ok(ExperimentRun {
        metrics,
        summary,
        state,
    })
}

/// Writes one CSV row per sample with its penultimate features under the
/// given parameters: `base_id,label,is_triggered,predicted,f0..f{h-1}`.
/// Returns the number of data rows written.
pub fn export_embeddings<W: Write>(
    params: &ParameterVector,
    dims: &ModelDims,
    samples: &[Sample],
    sink: &mut W,
) -> Result<usize> {
    if samples.is_empty() {
        return Err(SimError::empty("no samples to export"));
    }
    let mut header = String::from("base_id,label,is_triggered,predicted");
    for i in 0..dims.hidden_dim {
        header.push_str(&format!(",f{i}"));
    }
    writeln!(sink, "{header}")?;
    for s in samples {
        let fr = forward(params, dims, &s.x)?;
        let predicted = argmax_lowest(&fr.logits);
        let mut line = format!(
            "{},{},{},{}",
            s.base_id,
            s.label,
            u8::from(s.is_triggered),
            predicted
        );
        for f in &fr.features {
            line.push(',');
            line.push_str(&fmt_f64(*f));
        }
        writeln!(sink, "{line}")?;
    }
    Ok(samples.len())
}

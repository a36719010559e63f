//! Deterministic federated-learning simulator for studying semantics-aware
//! backdoor attacks against robust aggregation.
//!
//! The crate simulates synchronous federated training of a small ReLU
//! classifier over synthetic class-conditional Gaussian data. Malicious
//! clients mount either SABLE — a stealthy backdoor combining paired
//! clean/triggered cross-entropy, a margin-based feature-separation loss on
//! the penultimate layer, and parameter regularization toward the global
//! model — or a naive mixed-data baseline. The server aggregates with FedAvg,
//! coordinate-wise median, trimmed mean, MultiKrum, or flame_lite
//! (a simplified cosine-clustering relative of FLAME).
//!
//! Everything is a pure function of the experiment configuration and its
//! master seed: runs are bit-reproducible, and client updates can execute
//! concurrently without changing a single output byte.

pub mod aggregation;
pub mod attack;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod fmt;
pub mod model;
pub mod rng;

pub use aggregation::{
    aggregate, coord_median, fedavg, flame_lite, multikrum, trimmed_mean, AggConfig, AggOutcome,
    AggRule, ClientUpdate,
};
pub use attack::{
    apply_mask, importance_mask, malicious_loss_and_grad, pair_ce, reg_loss, sep_loss,
    MaliciousHyper, MaliciousTerms,
};
pub use config::{parse_config, parse_sweep, render_defaults, SweepKey, SweepSpec};
pub use data::{
    apply_trigger, build_malicious_sets, build_trigger_testset, gen_dataset, partition_noniid,
    ClientDataBundle, ClientRole, DataSpec, MaliciousSets, PairedSample, Sample,
};
pub use error::{Result, SimError};
pub use federation::{
    evaluate, export_embeddings, local_update_baseline, local_update_benign,
    local_update_malicious, run_experiment, summarize, AttackMode, ExperimentConfig,
    ExperimentRun, FederationState, RoundMetrics, Summary,
};
pub use model::{
    forward, grad_batch_ce, init_model, sgd_step, softmax_ce, ForwardResult, ModelDims,
    OptimizerState, ParameterVector, SgdConfig,
};

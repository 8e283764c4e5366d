//! Experiment orchestration: build the federation for a seed, train its
//! clients, run the server pipeline, persist artifacts, and aggregate
//! results across seeds, modes, and ablation knobs.
//!
//! Client training depends on the seed but not on the server mode, so
//! comparisons and ablations train clients once per seed and reuse them for
//! every arm — runs within a seed are exactly paired.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::client::{client_update, ClientConfig};
use crate::config::ExperimentConfig;
use crate::data::{
    dirichlet_partition, load_dataset, write_partition, DatasetHandle, LabelCounter,
    PartitionedFederation,
};
use crate::error::{DfdgError, Result};
use crate::losses::GateVariant;
use crate::metrics::{
    write_metrics, write_run_record, ClientReport, PartitionSummary, RunRecord,
    RECORD_SCHEMA_VERSION,
};
use crate::models::{
    budget_plan, build_model, extract_submodel, slice_parameters, write_checkpoint, BudgetPlan,
    MergeOp, ModelSpec, ParameterSet,
};
use crate::plots::{render_image_grid, render_line_plot, Series};
use crate::seeds::derive_seed;
use crate::server::{run_server, sample_noise_labels, Mode, ServerRunResult};

// ---------------------------------------------------------------------------
// federation setup

pub struct PreparedFederation {
    pub dataset: DatasetHandle,
    pub partition: PartitionedFederation,
    pub global_spec: ModelSpec,
    pub global_init: ParameterSet,
    pub budget: BudgetPlan,
    pub client_specs: Vec<ModelSpec>,
}

/// Load data, partition it, build the shared global initialization, and
/// derive each client's width-scaled spec from the budget schedule.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedFederation> {
    cfg.validate()?;
    let dataset = load_dataset(cfg.dataset, cfg.data_root.as_deref())?
        .subset(cfg.train_subset, cfg.test_subset);
    let partition =
        dirichlet_partition(&dataset, cfg.num_clients, cfg.omega, derive_seed(seed, "partition", 0))?;
    let global_spec = cfg.model_spec()?;
    let global_init = build_model(&global_spec, derive_seed(seed, "model", 0))?;
    let budget = budget_plan(cfg.num_clients, cfg.sigma, cfg.rho);
    let client_specs = budget
        .ratios
        .iter()
        .map(|&r| extract_submodel(&global_spec, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedFederation { dataset, partition, global_spec, global_init, budget, client_specs })
}

pub struct TrainedClients {
    pub params: Vec<ParameterSet>,
    pub counter: LabelCounter,
    pub reports: Vec<ClientReport>,
    /// Uniform-ensemble test accuracy of the trained clients; a diagnostic
    /// ceiling for what distillation can recover.
    pub ensemble_accuracy: f64,
}

/// Run every client's local training from its slice of the global
/// initialization.
pub fn train_clients(
    prep: &PreparedFederation,
    client_cfg: &ClientConfig,
    seed: u64,
) -> Result<TrainedClients> {
    let n = prep.partition.num_clients;
    let mut params = Vec::with_capacity(n);
    let mut counter = LabelCounter::zeros(n, prep.dataset.num_classes);
    let mut reports = Vec::with_capacity(n);
    for i in 0..n {
        let init = slice_parameters(&prep.global_init, &prep.client_specs[i])?;
        let shard = &prep.partition.client_indices[i];
        let outcome =
            client_update(i, &init, &prep.dataset, shard, client_cfg, derive_seed(seed, "client", i as u64))?;
        counter.counts[i] = outcome.label_counts.clone();
        reports.push(ClientReport {
            client_id: i,
            width_ratio: prep.budget.ratios[i],
            data_size: shard.len(),
            final_local_accuracy: outcome.final_local_accuracy,
            final_loss: outcome.final_loss,
        });
        params.push(outcome.params);
    }
    let ensemble_accuracy = crate::client::evaluate_ensemble(&params, &prep.dataset)?;
    Ok(TrainedClients { params, counter, reports, ensemble_accuracy })
}

// ---------------------------------------------------------------------------
// one run

/// Execute the server pipeline for one (mode, seed) and persist artifacts
/// under `run_dir`: the metrics log, the run record, checkpoints, and plots.
pub fn execute_run(
    cfg: &ExperimentConfig,
    mode: Mode,
    seed: u64,
    prep: &PreparedFederation,
    trained: &TrainedClients,
    run_dir: &Path,
) -> Result<RunRecord> {
    std::fs::create_dir_all(run_dir).map_err(|e| DfdgError::io(run_dir, e))?;
    let started = Instant::now();
    let server_cfg = cfg.server_config(mode);
    let result = run_server(
        &prep.dataset,
        &trained.params,
        &trained.counter,
        &prep.global_init,
        &server_cfg,
        derive_seed(seed, "server", 0),
    )?;
    let wall_time_secs = started.elapsed().as_secs_f64();

    let record = RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        mode: mode.as_str().into(),
        seed,
        rng_family: cfg.rng_family.clone(),
        config: cfg.clone(),
        partition: PartitionSummary {
            seed: prep.partition.seed,
            repair_offset: prep.partition.repair_offset,
            client_sizes: prep.partition.client_indices.iter().map(|c| c.len()).collect(),
        },
        averaged: result.averaged,
        clients: trained.reports.clone(),
        ensemble_accuracy: trained.ensemble_accuracy,
        eval_points: result.eval_points.clone(),
        best_accuracy: result.best_accuracy,
        wall_time_secs,
    };

    write_metrics(&record.eval_points, &run_dir.join("metrics.jsonl"))?;
    write_run_record(&record, &run_dir.join("record.json"))?;
    write_checkpoint(&result.student, &run_dir.join("student.ckpt"))?;
    for (k, gen) in result.generators.iter().enumerate() {
        write_checkpoint(&gen.params, &run_dir.join(format!("generator{k}.ckpt")))?;
    }
    render_accuracy_plot(&record, &run_dir.join("accuracy.png"))?;
    if !result.generators.is_empty() {
        render_sample_grid(&result, server_cfg.noise_dim, seed, &run_dir.join("samples.png"))?;
    }
    Ok(record)
}

fn render_accuracy_plot(record: &RunRecord, path: &Path) -> Result<()> {
    let series = vec![Series {
        label: record.mode.clone(),
        points: record
            .eval_points
            .iter()
            .map(|p| (p.outer_iter as f64, p.test_accuracy))
            .collect(),
    }];
    render_line_plot(path, "test accuracy", "outer iteration", "accuracy", &series)
}

/// A class-by-sample grid: one row per class, eight samples per row, columns
/// alternating between the trained generators.
fn render_sample_grid(
    result: &ServerRunResult,
    noise_dim: usize,
    seed: u64,
    path: &Path,
) -> Result<()> {
    const COLS: usize = 8;
    let num_classes = result.generators[0].spec().num_classes;
    let mut rng = crate::seeds::rng_from(seed, "sample-grid", 0);
    let probs = ndarray::Array1::from_elem(num_classes, 1.0 / num_classes as f64);
    let (z, _) = sample_noise_labels(&mut rng, COLS, noise_dim, &probs);
    let mut all = Vec::new();
    let mut shape = None;
    for class in 0..num_classes {
        let labels = vec![class; COLS];
        for (col, gen) in (0..COLS).map(|c| (c, &result.generators[c % result.generators.len()])) {
            let zi = Array2::from_shape_fn((1, noise_dim), |(_, j)| z[(col, j)]);
            let s = crate::server::generator_sample_values(gen, &zi, &labels[col..=col]);
            shape = Some((s.shape()[1], s.shape()[2], s.shape()[3]));
            all.extend(s.into_iter());
        }
    }
    let (c, h, w) = shape.expect("at least one sample");
    let images = ndarray::ArrayD::from_shape_vec(
        ndarray::IxDyn(&[num_classes * COLS, c, h, w]),
        all,
    )
    .expect("collected samples fill the grid");
    render_image_grid(&images, COLS, path)
}

// ---------------------------------------------------------------------------
// result tables

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub key: String,
    pub n_seeds: usize,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

pub fn summarize(groups: &[(String, Vec<f64>)]) -> ResultTable {
    let rows = groups
        .iter()
        .map(|(key, accs)| {
            let n = accs.len();
            let mean = accs.iter().sum::<f64>() / n.max(1) as f64;
            let std = if n >= 2 {
                let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                Some(var.sqrt())
            } else {
                None
            };
            ResultRow { key: key.clone(), n_seeds: n, accuracies: accs.clone(), mean, std }
        })
        .collect();
    ResultTable { rows }
}

fn write_table(table: &ResultTable, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(table).expect("table serializes");
    std::fs::write(path, json).map_err(|e| DfdgError::io(path, e))
}

// ---------------------------------------------------------------------------
// multi-seed experiments

pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    /// (seed, error message) for every seed that did not complete.
    pub failures: Vec<(u64, String)>,
    pub table: ResultTable,
}

impl ExperimentOutcome {
    pub fn all_completed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn seed_dir(base: &Path, mode: &str, seed: u64) -> PathBuf {
    base.join(mode).join(format!("seed{seed}"))
}

fn note_failure(dir: &Path, seed: u64, message: &str) {
    // best effort: the failure marker must not mask the original error
    if std::fs::create_dir_all(dir).is_ok() {
        let body = serde_json::json!({ "seed": seed, "error": message });
        let _ = std::fs::write(dir.join("failure.json"), body.to_string());
    }
}

/// Run the configured mode over every seed. A failing seed writes a
/// `failure.json` marker in its run directory and does not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    run_modes(cfg, &[cfg.mode], &cfg.output_dir)
}

/// Run several modes over every seed, training clients once per seed.
pub fn run_modes(cfg: &ExperimentConfig, modes: &[Mode], base_dir: &Path) -> Result<ExperimentOutcome> {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        let prepared = match prepare_and_train(cfg, seed) {
            Ok(pt) => pt,
            Err(e) => {
                let msg = e.to_string();
                for mode in modes {
                    note_failure(&seed_dir(base_dir, mode.as_str(), seed), seed, &msg);
                }
                failures.push((seed, msg));
                continue;
            }
        };
        let (prep, trained) = &prepared;
        for &mode in modes {
            let dir = seed_dir(base_dir, mode.as_str(), seed);
            match execute_run(cfg, mode, seed, prep, trained, &dir) {
                Ok(record) => records.push(record),
                Err(e) => {
                    let msg = e.to_string();
                    note_failure(&dir, seed, &msg);
                    failures.push((seed, msg));
                }
            }
        }
    }
    let groups: Vec<(String, Vec<f64>)> = modes
        .iter()
        .map(|m| {
            let accs = records
                .iter()
                .filter(|r| r.mode == m.as_str())
                .map(|r| r.best_accuracy)
                .collect();
            (m.as_str().to_string(), accs)
        })
        .collect();
    let table = summarize(&groups);
    write_table(&table, &base_dir.join("summary.json"))?;
    Ok(ExperimentOutcome { records, failures, table })
}

fn prepare_and_train(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(PreparedFederation, TrainedClients)> {
    let prep = prepare(cfg, seed)?;
    let trained = train_clients(&prep, &cfg.client_config(), seed)?;
    Ok((prep, trained))
}

/// Export the partition of one seed as the structured text format.
pub fn export_partition(cfg: &ExperimentConfig, seed: u64, path: &Path) -> Result<()> {
    let prep = prepare(cfg, seed)?;
    write_partition(&prep.partition, path)
}

// ---------------------------------------------------------------------------
// ablations

/// One arm of an ablation study over the full method's knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AblationKnob {
    Full,
    DropTran,
    DropDiv,
    DropCd,
    Merge(MergeOp),
    Gate(GateVariant),
}

impl AblationKnob {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => AblationKnob::Full,
            "drop_tran" => AblationKnob::DropTran,
            "drop_div" => AblationKnob::DropDiv,
            "drop_cd" => AblationKnob::DropCd,
            _ => {
                if let Some(m) = s.strip_prefix("merge_") {
                    AblationKnob::Merge(MergeOp::parse(m)?)
                } else if let Some(g) = s.strip_prefix("gate_") {
                    AblationKnob::Gate(match g {
                        "diamond" => GateVariant::Diamond,
                        "triangle_up" => GateVariant::TriangleUp,
                        "triangle_down" => GateVariant::TriangleDown,
                        other => {
                            return Err(DfdgError::Config(format!("unknown gate `{other}`")))
                        }
                    })
                } else {
                    return Err(DfdgError::Config(format!("unknown ablation knob `{s}`")));
                }
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            AblationKnob::Full => "full".into(),
            AblationKnob::DropTran => "drop_tran".into(),
            AblationKnob::DropDiv => "drop_div".into(),
            AblationKnob::DropCd => "drop_cd".into(),
            AblationKnob::Merge(m) => format!("merge_{}", merge_name(*m)),
            AblationKnob::Gate(g) => format!(
                "gate_{}",
                match g {
                    GateVariant::Diamond => "diamond",
                    GateVariant::TriangleUp => "triangle_up",
                    GateVariant::TriangleDown => "triangle_down",
                }
            ),
        }
    }

    /// The experiment configuration for this arm (always the full
    /// dual-generator mode, with one knob turned).
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.mode = Mode::Dfdg;
        match self {
            AblationKnob::Full => {}
            AblationKnob::DropTran => cfg.server.beta_tran = 0.0,
            AblationKnob::DropDiv => cfg.server.beta_div = 0.0,
            AblationKnob::DropCd => cfg.server.beta_cd = 0.0,
            AblationKnob::Merge(m) => cfg.server.merge = *m,
            AblationKnob::Gate(g) => cfg.server.variant = *g,
        }
        cfg
    }
}

fn merge_name(m: MergeOp) -> &'static str {
    match m {
        MergeOp::Mul => "mul",
        MergeOp::Add => "add",
        MergeOp::Cat => "cat",
        MergeOp::Ncat => "ncat",
        MergeOp::None => "none",
    }
}

/// Run every knob over every seed, training clients once per seed. All arms
/// of a seed share the same partition, client models, and server seed, so
/// differences come only from the knob.
pub fn run_ablation(cfg: &ExperimentConfig, knobs: &[AblationKnob], base_dir: &Path) -> Result<ExperimentOutcome> {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        let prepared = match prepare_and_train(cfg, seed) {
            Ok(pt) => pt,
            Err(e) => {
                let msg = e.to_string();
                for knob in knobs {
                    note_failure(&seed_dir(base_dir, &knob.name(), seed), seed, &msg);
                }
                failures.push((seed, msg));
                continue;
            }
        };
        let (prep, trained) = &prepared;
        for knob in knobs {
            let arm_cfg = knob.apply(cfg);
            let dir = seed_dir(base_dir, &knob.name(), seed);
            match execute_run(&arm_cfg, Mode::Dfdg, seed, prep, trained, &dir) {
                Ok(mut record) => {
                    record.mode = knob.name();
                    records.push(record);
                }
                Err(e) => {
                    let msg = e.to_string();
                    note_failure(&dir, seed, &msg);
                    failures.push((seed, msg));
                }
            }
        }
    }
    let groups: Vec<(String, Vec<f64>)> = knobs
        .iter()
        .map(|k| {
            let name = k.name();
            let accs = records
                .iter()
                .filter(|r| r.mode == name)
                .map(|r| r.best_accuracy)
                .collect();
            (name, accs)
        })
        .collect();
    let table = summarize(&groups);
    write_table(&table, &base_dir.join("summary.json"))?;
    Ok(ExperimentOutcome { records, failures, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::defaults_for;
    use crate::data::DatasetName;

    fn quick_cfg(dir: &Path) -> ExperimentConfig {
        let mut cfg = defaults_for(DatasetName::SynthToy);
        cfg.output_dir = dir.to_path_buf();
        cfg.train_subset = Some(120);
        cfg.test_subset = Some(60);
        cfg.num_clients = 2;
        cfg.seeds = vec![0];
        cfg.client.local_epochs = 2;
        cfg.server.outer_iters = 2;
        cfg.server.gen_inner_iters = 2;
        cfg.server.distill_inner_iters = 1;
        cfg.server.batch_size = 8;
        cfg.server.noise_dim = 16;
        cfg.server.gen_base_width = 8;
        cfg.server.eval_every = 1;
        cfg
    }

    #[test]
    fn summarize_computes_mean_and_sample_std() {
        let table = summarize(&[
            ("a".into(), vec![0.5, 0.7]),
            ("b".into(), vec![0.4]),
            ("c".into(), vec![]),
        ]);
        let a = &table.rows[0];
        assert_eq!(a.n_seeds, 2);
        assert!((a.mean - 0.6).abs() < 1e-12);
        // sample std of {0.5, 0.7} is sqrt(2 * 0.01) = 0.1414...
        assert!((a.std.unwrap() - (0.02f64).sqrt()).abs() < 1e-12);
        assert_eq!(table.rows[1].std, None);
        assert_eq!(table.rows[2].n_seeds, 0);
    }

    #[test]
    fn knob_parsing_round_trips() {
        for name in ["full", "drop_tran", "drop_div", "drop_cd", "merge_ncat", "gate_triangle_up"] {
            let knob = AblationKnob::parse(name).unwrap();
            assert_eq!(knob.name(), name);
        }
        assert!(AblationKnob::parse("merge_bogus").is_err());
        assert!(AblationKnob::parse("nonsense").is_err());
    }

    #[test]
    fn knobs_modify_only_their_field() {
        let base = defaults_for(DatasetName::SynthToy);
        let drop = AblationKnob::DropCd.apply(&base);
        assert_eq!(drop.server.beta_cd, 0.0);
        assert_eq!(drop.server.beta_tran, base.server.beta_tran);
        let merged = AblationKnob::Merge(MergeOp::Ncat).apply(&base);
        assert_eq!(merged.server.merge, MergeOp::Ncat);
        assert_eq!(merged.server.beta_cd, base.server.beta_cd);
    }

    #[test]
    fn full_run_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        let outcome = run_experiment(&cfg).unwrap();
        assert!(outcome.all_completed(), "failures: {:?}", outcome.failures);
        assert_eq!(outcome.records.len(), 1);
        let run_dir = dir.path().join("dfdg/seed0");
        for artifact in
            ["metrics.jsonl", "record.json", "student.ckpt", "generator0.ckpt", "generator1.ckpt", "accuracy.png", "samples.png"]
        {
            assert!(run_dir.join(artifact).exists(), "missing {artifact}");
        }
        assert!(dir.path().join("summary.json").exists());
        let record = crate::metrics::read_run_record(&run_dir.join("record.json")).unwrap();
        assert_eq!(record.mode, "dfdg");
        assert_eq!(record.clients.len(), 2);
        assert!(record.wall_time_secs > 0.0);
        // checkpoints reload
        let student = crate::models::read_checkpoint(&run_dir.join("student.ckpt")).unwrap();
        assert_eq!(student.arch, crate::models::ArchSpec::Model(cfg.model_spec().unwrap()));
    }

    #[test]
    fn metrics_logs_are_reproduced_byte_for_byte() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let out1 = run_experiment(&quick_cfg(dir1.path())).unwrap();
        let out2 = run_experiment(&quick_cfg(dir2.path())).unwrap();
        assert!(out1.all_completed() && out2.all_completed());
        let m1 = std::fs::read(dir1.path().join("dfdg/seed0/metrics.jsonl")).unwrap();
        let m2 = std::fs::read(dir2.path().join("dfdg/seed0/metrics.jsonl")).unwrap();
        assert!(!m1.is_empty());
        assert_eq!(m1, m2);
    }

    #[test]
    fn comparison_pairs_modes_within_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        let outcome =
            run_modes(&cfg, &[Mode::Dfdg, Mode::FedavgOnly], &dir.path().join("compare")).unwrap();
        assert!(outcome.all_completed());
        assert_eq!(outcome.records.len(), 2);
        assert_eq!(outcome.table.rows.len(), 2);
        // both arms saw the identical partition and client models
        let a = &outcome.records[0].partition;
        let b = &outcome.records[1].partition;
        assert_eq!(a, b);
        assert_eq!(outcome.records[0].clients, outcome.records[1].clients);
    }
}

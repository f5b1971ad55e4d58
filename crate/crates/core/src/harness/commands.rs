//! The six commands. Each returns the path of what it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Initializer, MethodSpec};
use super::experiment::{
    bundle_archive, initialize, obtain_backbone, prompt_sets, read_bundle, run_one, train_from,
    BackboneBundle, InitRequest, InitSummary, RunSpec, TaskData,
};
use super::plot::{Heatmap, PlotData, ReferenceLine, Series};
use super::{prepare_run_dir, read_json, write_csv, write_json};
use crate::archive::{prompts_archive, prompts_from_archive, TensorArchive};
use crate::diagnostics::grassmannian_distance;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::task_synth::TaskSpec;
use crate::trainer::{
    select_best, sweep, DiagnosticsConfig, RunRecord, SweepCell, SweepReport, TrainAbort,
    TrainOutcome, TrainablePrompts,
};
use crate::vit::{forward, ClassifierHead, PromptInput, PromptMode, PromptSet};

pub const BACKBONE_FILE: &str = "backbone.vpt";
pub const PROMPTS_FILE: &str = "prompts.vpt";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BEST_FILE: &str = "best.vpt";
pub const FINAL_FILE: &str = "final.vpt";

fn abort_to_error(dir: &Path, abort: TrainAbort) -> Error {
    if let Some(partial) = &abort.partial {
        // Best effort: the partial record helps diagnose the divergence.
        let _ = write_json(&dir.join("partial_run.json"), partial.as_ref());
    }
    abort.error
}

/// `pretrain`: trains a backbone from `[backbone.pretrain]` and writes
/// `backbone.vpt` (plus `pretrain.json`).
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    if cfg.backbone.pretrain.is_none() {
        return Err(Error::Config("pretrain needs a [backbone.pretrain] section".into()));
    }
    let dir = prepare_run_dir(cfg)?;
    let bundle = obtain_backbone(cfg)?;
    let path = dir.join(BACKBONE_FILE);
    bundle_archive(&bundle)?.write(&path)?;
    write_json(
        &dir.join("pretrain.json"),
        &serde_json::json!({
            "backbone_digest": bundle.backbone.digest(),
            "spec": cfg.backbone.pretrain,
            "report": bundle.report,
        }),
    )?;
    log::info!("backbone written to {}", path.display());
    Ok(path)
}

fn init_request(cfg: &ExperimentConfig) -> Result<InitRequest> {
    let initializer = cfg.require_initializer()?;
    Ok(InitRequest {
        initializer,
        mode: cfg.mode,
        config: cfg.require_init()?.to_init_config(cfg.seed),
    })
}

fn summary_of(req: &InitRequest, out: &super::experiment::InitOutput, bundle: &BackboneBundle) -> InitSummary {
    InitSummary {
        initializer: req.initializer,
        mode: req.mode,
        config: req.config.clone(),
        forward_count: out.forward_count,
        wall_clock_ms: out.wall_clock_ms,
        warnings: out.warnings.clone(),
        backbone_digest: bundle.backbone.digest(),
    }
}

/// `init`: runs the configured initializer and writes `prompts.vpt`, whose
/// metadata records the forward-pass count and wall-clock time.
pub fn cmd_init(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let req = init_request(cfg)?;
    let task = cfg.require_task()?;
    let dir = prepare_run_dir(cfg)?;
    let bundle = obtain_backbone(cfg)?;
    let data = TaskData::build(&bundle, task, cfg.few_shot, cfg.seed)?;
    let out = initialize(&bundle, &data, &req)?;
    let summary = summary_of(&req, &out, &bundle);
    let path = dir.join(PROMPTS_FILE);
    prompts_archive(&out.sets, serde_json::json!({ "init": summary }))?.write(&path)?;
    write_json(&dir.join("init.json"), &summary)?;
    Ok(path)
}

/// Everything `train` wrote about a run, as stored in `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFile {
    pub config: ExperimentConfig,
    /// Backbone used, relative paths resolved.
    pub backbone_path: PathBuf,
    /// How the prompts were initialized (absent when loaded from an archive
    /// without that metadata).
    pub init: Option<InitSummary>,
    pub record: RunRecord,
}

#[derive(Debug, Serialize)]
struct MetricsRow {
    epoch: usize,
    train_loss: f64,
    train_accuracy: f64,
    val_accuracy: f64,
    learning_rate: f64,
    entropy: Option<f64>,
    energy: Option<f64>,
    energy_with_bias: Option<f64>,
    wall_clock_ms: f64,
}

fn metrics_rows(record: &RunRecord) -> Vec<MetricsRow> {
    record
        .epochs
        .iter()
        .zip(&record.wall_clock_ms)
        .map(|(e, &ms)| MetricsRow {
            epoch: e.epoch,
            train_loss: e.train_loss,
            train_accuracy: e.train_accuracy,
            val_accuracy: e.val_accuracy,
            learning_rate: e.learning_rate,
            entropy: e.entropy.as_ref().map(|r| r.mean),
            energy: e.energy.as_ref().map(|r| r.value),
            energy_with_bias: e.energy_with_bias,
            wall_clock_ms: ms,
        })
        .collect()
}

fn parameters_archive(prompts: &TrainablePrompts, head: &ClassifierHead) -> Result<TensorArchive> {
    let mut a = prompts_archive(&prompt_sets(prompts)?, serde_json::json!({}))?;
    a.push("head.weight", head.weight.clone());
    a.push("head.bias", DenseMatrix::row_vector(&head.bias));
    Ok(a)
}

fn read_parameters(path: &Path) -> Result<(Vec<PromptSet>, ClassifierHead)> {
    let a = TensorArchive::read(path)?;
    let sets = prompts_from_archive(&a)?;
    let head = ClassifierHead {
        weight: a.require("head.weight")?.clone(),
        bias: a.require("head.bias")?.data().to_vec(),
    };
    Ok((sets, head))
}

fn train_spec<'a>(cfg: &ExperimentConfig, data: &'a TaskData) -> Result<RunSpec<'a>> {
    let init = match &cfg.init {
        Some(i) => i.to_init_config(cfg.seed),
        None => crate::prompt_init::InitConfig {
            n_p: 1,
            k: 1,
            lambda: 0.0,
            batch_size: crate::prompt_init::DEFAULT_INIT_BATCH,
            seed: cfg.seed,
            include_key_bias: false,
        },
    };
    Ok(RunSpec {
        initializer: cfg.initializer.unwrap_or(Initializer::Xavier),
        mode: cfg.mode,
        init,
        train: cfg.require_train()?.clone(),
        diagnostics: cfg.diagnostics.clone(),
        seed: cfg.seed,
        data,
    })
}

/// `train`: trains prompts (from `prompts`, or initialized on the spot) and
/// writes `run.json`, `metrics.csv`, `summary.json`, `best.vpt` and
/// `final.vpt`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let task = cfg.require_task()?;
    cfg.require_train()?;
    if cfg.prompts.is_none() {
        cfg.require_initializer()?;
        cfg.require_init()?;
    }
    let dir = prepare_run_dir(cfg)?;
    let bundle = obtain_backbone(cfg)?;
    let backbone_path = match &bundle.path {
        Some(p) => p.clone(),
        None => {
            let p = dir.join(BACKBONE_FILE);
            bundle_archive(&bundle)?.write(&p)?;
            p
        }
    };
    let data = TaskData::build(&bundle, task, cfg.few_shot, cfg.seed)?;
    let spec = train_spec(cfg, &data)?;
    let (outcome, init) = match &cfg.prompts {
        Some(path) => {
            let archive = TensorArchive::read(path)?;
            let init: Option<InitSummary> = archive
                .metadata
                .get("init")
                .map(|v| serde_json::from_value(v.clone()))
                .transpose()?;
            if let Some(i) = &init {
                if i.backbone_digest != bundle.backbone.digest() {
                    return Err(Error::Digest {
                        what: format!("backbone of prompts {}", path.display()),
                        expected: i.backbone_digest.clone(),
                        found: bundle.backbone.digest(),
                    });
                }
            }
            let sets = prompts_from_archive(&archive)?;
            let outcome = train_from(&bundle, &spec, &sets).map_err(|a| abort_to_error(&dir, a))?;
            (outcome, init)
        }
        None => {
            let r = run_one(&bundle, &spec).map_err(|a| abort_to_error(&dir, a))?;
            let req = InitRequest {
                initializer: spec.initializer,
                mode: spec.mode,
                config: spec.init.clone(),
            };
            let summary = summary_of(&req, &r.init, &bundle);
            (r.outcome, Some(summary))
        }
    };
    write_run(&dir, cfg, backbone_path, init, &outcome)?;
    Ok(dir)
}

fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    backbone_path: PathBuf,
    init: Option<InitSummary>,
    outcome: &TrainOutcome,
) -> Result<()> {
    let record = &outcome.record;
    write_csv(&dir.join(METRICS_FILE), &metrics_rows(record))?;
    let last = record.last_epoch();
    write_json(
        &dir.join(SUMMARY_FILE),
        &serde_json::json!({
            "epochs": record.epochs.len() - 1,
            "best_epoch": record.best_epoch,
            "best_val_accuracy": record.best_val_accuracy,
            "best_test_accuracy": record.best_test_accuracy,
            "final_test_accuracy": record.final_test_accuracy,
            "final_train_accuracy": last.train_accuracy,
            "final_val_accuracy": last.val_accuracy,
            "final_train_loss": last.train_loss,
        }),
    )?;
    parameters_archive(&outcome.best_prompts, &outcome.best_head)?.write(&dir.join(BEST_FILE))?;
    parameters_archive(&outcome.final_prompts, &outcome.final_head)?.write(&dir.join(FINAL_FILE))?;
    write_json(
        &dir.join(RUN_FILE),
        &RunFile {
            config: cfg.clone(),
            backbone_path,
            init,
            record: record.clone(),
        },
    )
}

/// Measurements `diagnose` can report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Entropy,
    Energy,
    DeepEnergy,
    Grassmann,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Entropy => "entropy",
            Metric::Energy => "energy",
            Metric::DeepEnergy => "deep-energy",
            Metric::Grassmann => "grassmann",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Metric::Entropy),
            "energy" => Ok(Metric::Energy),
            "deep-energy" => Ok(Metric::DeepEnergy),
            "grassmann" => Ok(Metric::Grassmann),
            other => Err(Error::Config(format!(
                "unknown metric {other:?} (entropy, energy, deep-energy, grassmann)"
            ))),
        }
    }
}

#[derive(Debug, Serialize)]
struct EntropyRow {
    epoch: usize,
    mean_entropy: f64,
    max_attainable: f64,
    layer_index: usize,
    sample_count: usize,
}

#[derive(Debug, Serialize)]
struct EnergyRow {
    epoch: usize,
    energy: f64,
    energy_with_bias: Option<f64>,
}

#[derive(Debug, Serialize)]
struct DeepEnergyRow {
    epoch: usize,
    layer: usize,
    energy: f64,
}

#[derive(Debug, Serialize)]
struct GrassmannRow {
    run: String,
    reference: String,
    samples: usize,
    distance: f64,
}

fn missing(metric: Metric) -> Error {
    Error::Config(format!(
        "run has no {} measurements (diagnostics were disabled)",
        metric.name()
    ))
}

/// Last-layer CLS representations of a trained run on `data`'s test split.
fn llcr(bundle: &BackboneBundle, run_dir: &Path, data: &TaskData) -> Result<DenseMatrix> {
    let (sets, head) = read_parameters(&run_dir.join(FINAL_FILE))?;
    let mats: Vec<DenseMatrix> = sets.iter().map(|s| s.prompts.clone()).collect();
    let deep = sets.len() > 1 || sets.iter().any(|s| s.deep_layer.is_some());
    let mut rows = Vec::with_capacity(data.test.len());
    for ex in &data.test {
        let input = if deep {
            PromptInput::Deep(&mats)
        } else {
            PromptInput::Shallow(&mats[0])
        };
        rows.push(forward(&bundle.backbone, &head, &ex.embeddings, input)?.llcr);
    }
    DenseMatrix::from_rows(&rows)
}

/// `diagnose`: per-metric CSV plus plot-data JSON in `out` (default:
/// `<run>/diagnostics`). Returns the CSV and JSON paths.
pub fn cmd_diagnose(
    run_dir: &Path,
    metric: Metric,
    reference: Option<&Path>,
    out: Option<&Path>,
) -> Result<(PathBuf, PathBuf)> {
    let run: RunFile = read_json(&run_dir.join(RUN_FILE))?;
    let record = &run.record;
    let out_dir = out.map_or_else(|| run_dir.join("diagnostics"), Path::to_path_buf);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let csv_path = out_dir.join(format!("{}.csv", metric.name()));
    let plot_path = out_dir.join(format!("{}.plot.json", metric.name()));
    let run_label = run.config.run_id.clone();
    match metric {
        Metric::Entropy => {
            let rows: Vec<EntropyRow> = record
                .epochs
                .iter()
                .filter_map(|e| {
                    e.entropy.as_ref().map(|r| EntropyRow {
                        epoch: e.epoch,
                        mean_entropy: r.mean,
                        max_attainable: r.max_attainable,
                        layer_index: r.layer_index,
                        sample_count: r.sample_count,
                    })
                })
                .collect();
            let max = rows.first().ok_or_else(|| missing(metric))?.max_attainable;
            write_csv(&csv_path, &rows)?;
            let mut plot = PlotData::new(
                "entropy",
                format!("Prompt attention entropy ({run_label})"),
                "epoch",
                "mean prompt attention entropy (nats)",
            );
            plot.series.push(Series {
                label: run_label,
                x: rows.iter().map(|r| r.epoch as f64).collect(),
                y: rows.iter().map(|r| r.mean_entropy).collect(),
            });
            plot.reference_lines.push(ReferenceLine {
                label: "ln(N_e)".into(),
                y: max,
            });
            plot.write(&plot_path)?;
        }
        Metric::Energy => {
            let rows: Vec<EnergyRow> = record
                .epochs
                .iter()
                .map(|e| {
                    e.energy.as_ref().map(|r| EnergyRow {
                        epoch: e.epoch,
                        energy: r.value,
                        energy_with_bias: e.energy_with_bias,
                    })
                })
                .collect::<Option<_>>()
                .ok_or_else(|| missing(metric))?;
            write_csv(&csv_path, &rows)?;
            let mut plot = PlotData::new(
                "energy",
                format!("Projection energy of P W_V onto SA(E_0) ({run_label})"),
                "epoch",
                "projection energy",
            );
            plot.series.push(Series {
                label: run_label,
                x: rows.iter().map(|r| r.epoch as f64).collect(),
                y: rows.iter().map(|r| r.energy).collect(),
            });
            plot.reference_lines.push(ReferenceLine {
                label: "full collapse".into(),
                y: 1.0,
            });
            plot.write(&plot_path)?;
        }
        Metric::DeepEnergy => {
            if record.mode != PromptMode::Deep {
                return Err(Error::Config("deep-energy needs a deep-mode run".into()));
            }
            let mut rows = Vec::new();
            for e in &record.epochs {
                if e.deep_energy.is_empty() {
                    return Err(missing(metric));
                }
                for r in &e.deep_energy {
                    rows.push(DeepEnergyRow {
                        epoch: e.epoch,
                        layer: r.layer_index,
                        energy: r.value,
                    });
                }
            }
            write_csv(&csv_path, &rows)?;
            let mut by_layer: BTreeMap<usize, Series> = BTreeMap::new();
            for r in &rows {
                let s = by_layer.entry(r.layer).or_insert_with(|| Series {
                    label: format!("block {}", r.layer + 1),
                    x: Vec::new(),
                    y: Vec::new(),
                });
                s.x.push(r.epoch as f64);
                s.y.push(r.energy);
            }
            let mut plot = PlotData::new(
                "deep-energy",
                format!("Per-block projection energy ({run_label})"),
                "epoch",
                "projection energy",
            );
            plot.series = by_layer.into_values().collect();
            plot.write(&plot_path)?;
        }
        Metric::Grassmann => {
            let reference_dir = reference.unwrap_or(run_dir);
            let reference_run: RunFile = read_json(&reference_dir.join(RUN_FILE))?;
            let bundle = read_bundle(&run.backbone_path)?;
            if reference_run.record.backbone_digest != bundle.backbone.digest() {
                return Err(Error::Config(
                    "grassmann compares runs on the same backbone".into(),
                ));
            }
            let task = run.config.require_task()?;
            let data = TaskData::build(&bundle, task, run.config.few_shot, run.config.seed)?;
            let a = llcr(&bundle, run_dir, &data)?;
            let b = llcr(&bundle, reference_dir, &data)?;
            let distance = grassmannian_distance(&a, &b, None)?;
            let row = GrassmannRow {
                run: run_label.clone(),
                reference: reference_run.config.run_id.clone(),
                samples: a.rows(),
                distance,
            };
            write_csv(&csv_path, std::slice::from_ref(&row))?;
            let mut plot = PlotData::new(
                "grassmann",
                format!("Grassmannian distance of last-layer CLS representations ({run_label} vs {})", row.reference),
                "pair",
                "distance",
            );
            plot.series.push(Series {
                label: format!("{} vs {}", row.run, row.reference),
                x: vec![0.0],
                y: vec![distance],
            });
            plot.write(&plot_path)?;
        }
    }
    Ok((csv_path, plot_path))
}

/// Per-task seeded data, built once and shared by every cell or method.
fn task_suite(cfg: &ExperimentConfig, extra: &[TaskSpec]) -> Result<Vec<TaskSpec>> {
    let mut tasks = vec![cfg.require_task()?.clone()];
    tasks.extend(extra.iter().cloned());
    for t in &tasks {
        t.validate()?;
    }
    Ok(tasks)
}

fn task_label(i: usize, t: &TaskSpec) -> String {
    let kind = serde_json::to_value(t.kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    format!("t{i}:{kind}@{:.4}", t.shift_angle)
}

#[derive(Debug, Serialize)]
struct SweepRunRow {
    task: String,
    k: usize,
    lambda: f64,
    learning_rate: f64,
    seed: u64,
    best_val_accuracy: Option<f64>,
    best_test_accuracy: Option<f64>,
    final_test_accuracy: Option<f64>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct SweepCellRow {
    task: String,
    k: usize,
    lambda: f64,
    learning_rate: f64,
    score: Option<f64>,
    mean_test_accuracy: Option<f64>,
    selected: bool,
}

#[derive(Debug, Serialize)]
struct HeatmapRow {
    task: String,
    k: usize,
    lambda: f64,
    learning_rate: Option<f64>,
    test_accuracy: Option<f64>,
    normalized: Option<f64>,
}

/// Column-wise min-max normalization; a constant column maps to 1.
pub fn min_max_normalize(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|v| v.map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 1.0 }))
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// The heat map entry of one `(k, lambda)`: its best learning rate by
/// validation score, and that cell's mean test accuracy.
fn heat_entry(report: &SweepReport, k: usize, lambda: f64) -> (Option<f64>, Option<f64>) {
    let cands: Vec<(usize, (SweepCell, f64))> = report
        .cells
        .iter()
        .enumerate()
        .filter(|(_, c)| c.cell.k == k && c.cell.lambda == lambda)
        .filter_map(|(i, c)| c.score.map(|s| (i, (c.cell, s))))
        .collect();
    let flat: Vec<(SweepCell, f64)> = cands.iter().map(|c| c.1).collect();
    match select_best(&flat) {
        Some(j) => {
            let cell = &report.cells[cands[j].0];
            (
                Some(cell.cell.learning_rate),
                mean(cell.records().map(|r| r.best_test_accuracy)),
            )
        }
        None => (None, None),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTaskReport {
    pub task: TaskSpec,
    pub label: String,
    pub report: SweepReport,
}

/// `sweep`: the full `k x lambda x lr` grid over `sweep.seeds` for every
/// task, with validation-accuracy selection and the normalized heat map.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let grid = cfg.sweep_grid()?;
    sweep_initializer(cfg)?;
    cfg.require_init()?;
    cfg.require_train()?;
    task_suite(cfg, &cfg.sweep.as_ref().expect("checked by sweep_grid").tasks)?;
    let dir = prepare_run_dir(cfg)?;
    let bundle = obtain_backbone(cfg)?;
    let reports = run_sweep(cfg, &bundle)?;
    write_sweep(&dir, &grid.k_pool, &grid.lambda_pool, &reports)?;
    Ok(dir)
}

fn sweep_initializer(cfg: &ExperimentConfig) -> Result<Initializer> {
    let initializer = cfg.initializer.unwrap_or(Initializer::Vipamin);
    if !initializer.uses_vipamin_params() {
        return Err(Error::Config(format!(
            "sweep varies k and lambda, which {} does not have",
            initializer.name()
        )));
    }
    Ok(initializer)
}

/// Runs the configured sweep on `bundle` for every task.
pub fn run_sweep(cfg: &ExperimentConfig, bundle: &BackboneBundle) -> Result<Vec<SweepTaskReport>> {
    let initializer = sweep_initializer(cfg)?;
    let grid = cfg.sweep_grid()?;
    let section = cfg.sweep.as_ref().expect("checked by sweep_grid");
    let tasks = task_suite(cfg, &section.tasks)?;
    let init_section = cfg.require_init()?;
    let train_cfg = cfg.require_train()?.clone();

    let mut reports = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let label = task_label(t, task);
        let data: Vec<TaskData> = section
            .seeds
            .iter()
            .map(|&s| TaskData::build(bundle, task, cfg.few_shot, s))
            .collect::<Result<_>>()?;
        let report = sweep(&grid, &section.seeds, |cell, index, seed| {
            let pos = section.seeds.iter().position(|&s| s == seed).expect("seed from list");
            let mut init = init_section.to_init_config(seed);
            init.k = cell.k;
            init.lambda = cell.lambda;
            let mut train = train_cfg.clone();
            train.learning_rate = cell.learning_rate;
            log::info!("sweep {label} cell {index} seed {seed}");
            let spec = RunSpec {
                initializer,
                mode: cfg.mode,
                init,
                train,
                diagnostics: DiagnosticsConfig {
                    enabled: false,
                    ..cfg.diagnostics.clone()
                },
                seed,
                data: &data[pos],
            };
            run_one(bundle, &spec).map(|r| r.outcome.record).map_err(|a| a.error)
        })?;
        reports.push(SweepTaskReport {
            task: task.clone(),
            label,
            report,
        });
    }
    Ok(reports)
}

fn write_sweep(
    dir: &Path,
    k_pool: &[usize],
    lambda_pool: &[f64],
    reports: &[SweepTaskReport],
) -> Result<()> {
    let mut runs = Vec::new();
    let mut cells = Vec::new();
    for tr in reports {
        for (i, c) in tr.report.cells.iter().enumerate() {
            for run in &c.runs {
                let r = run.result.as_ref().ok();
                runs.push(SweepRunRow {
                    task: tr.label.clone(),
                    k: c.cell.k,
                    lambda: c.cell.lambda,
                    learning_rate: c.cell.learning_rate,
                    seed: run.seed,
                    best_val_accuracy: r.map(|r| r.best_val_accuracy),
                    best_test_accuracy: r.map(|r| r.best_test_accuracy),
                    final_test_accuracy: r.map(|r| r.final_test_accuracy),
                    error: run.result.as_ref().err().cloned(),
                });
            }
            cells.push(SweepCellRow {
                task: tr.label.clone(),
                k: c.cell.k,
                lambda: c.cell.lambda,
                learning_rate: c.cell.learning_rate,
                score: c.score,
                mean_test_accuracy: mean(c.records().map(|r| r.best_test_accuracy)),
                selected: tr.report.best == Some(i),
            });
        }
    }
    write_csv(&dir.join("sweep_runs.csv"), &runs)?;
    write_csv(&dir.join("sweep.csv"), &cells)?;

    let row_keys: Vec<(usize, f64)> = k_pool
        .iter()
        .flat_map(|&k| lambda_pool.iter().map(move |&l| (k, l)))
        .collect();
    let mut heat_rows = Vec::new();
    let mut columns = Vec::new();
    for tr in reports {
        let entries: Vec<(Option<f64>, Option<f64>)> =
            row_keys.iter().map(|&(k, l)| heat_entry(&tr.report, k, l)).collect();
        let norm = min_max_normalize(&entries.iter().map(|e| e.1).collect::<Vec<_>>());
        for ((&(k, lambda), (lr, acc)), n) in row_keys.iter().zip(&entries).zip(&norm) {
            heat_rows.push(HeatmapRow {
                task: tr.label.clone(),
                k,
                lambda,
                learning_rate: *lr,
                test_accuracy: *acc,
                normalized: *n,
            });
        }
        columns.push(norm);
    }
    write_csv(&dir.join("heatmap.csv"), &heat_rows)?;
    let mut plot = PlotData::new(
        "sweep-heatmap",
        "Normalized top-1 test accuracy per (k, lambda); min-max per task",
        "task",
        "(k, lambda)",
    );
    plot.heatmap = Some(Heatmap {
        row_labels: row_keys.iter().map(|(k, l)| format!("k={k}, lambda={l}")).collect(),
        col_labels: reports.iter().map(|r| r.label.clone()).collect(),
        // Failed cells have no accuracy; they are drawn at 0.
        values: (0..row_keys.len())
            .map(|r| columns.iter().map(|c| c[r].unwrap_or(0.0)).collect())
            .collect(),
    });
    plot.write(&dir.join("heatmap.plot.json"))?;
    write_json(&dir.join("sweep.json"), reports)
}

/// One `(method, task)` cell of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub task: String,
    /// Test accuracy (best-validation checkpoint) of each seed, in seed order.
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    /// 1 = best, 2 = second best in this task column; 0 otherwise.
    pub mark: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub methods: Vec<String>,
    pub tasks: Vec<String>,
    pub seeds: Vec<u64>,
    /// Method-major, then task.
    pub rows: Vec<CompareRow>,
    /// Full records, `[method][task][seed]`.
    pub records: Vec<Vec<Vec<RunRecord>>>,
    /// Reported setting, `[method][task]`; empty when built by [`aggregate`]
    /// alone.
    #[serde(default)]
    pub selections: Vec<Vec<Selection>>,
}

impl CompareReport {
    pub fn row(&self, method: &str, task: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.method == method && r.task == task)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Ranks column entries by mean: the maximum gets 1, the next distinct
/// value 2 (ties share a mark).
pub fn marks(means: &[f64]) -> Vec<u8> {
    let mut distinct: Vec<f64> = means.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    means
        .iter()
        .map(|m| {
            if Some(m) == distinct.first() {
                1
            } else if Some(m) == distinct.get(1) {
                2
            } else {
                0
            }
        })
        .collect()
}

pub const AVERAGE_COLUMN: &str = "mean";

/// Builds the comparison table from `[method][task][seed]` records.
pub fn aggregate(
    methods: Vec<String>,
    tasks: Vec<String>,
    seeds: Vec<u64>,
    records: Vec<Vec<Vec<RunRecord>>>,
) -> CompareReport {
    let mut rows = Vec::new();
    let mut columns: Vec<String> = tasks.clone();
    columns.push(AVERAGE_COLUMN.into());
    let mut grid: Vec<Vec<CompareRow>> = Vec::new();
    for (m, per_task) in methods.iter().zip(&records) {
        let mut row_cells = Vec::new();
        for (t, per_seed) in tasks.iter().zip(per_task) {
            let values: Vec<f64> = per_seed.iter().map(|r| r.best_test_accuracy).collect();
            let (mean, std) = mean_std(&values);
            row_cells.push(CompareRow {
                method: m.clone(),
                task: t.clone(),
                values,
                mean,
                std,
                mark: 0,
            });
        }
        // Average column: per-seed means across tasks.
        let per_seed_avg: Vec<f64> = (0..seeds.len())
            .map(|s| per_task.iter().map(|ps| ps[s].best_test_accuracy).sum::<f64>() / per_task.len() as f64)
            .collect();
        let (mean, std) = mean_std(&per_seed_avg);
        row_cells.push(CompareRow {
            method: m.clone(),
            task: AVERAGE_COLUMN.into(),
            values: per_seed_avg,
            mean,
            std,
            mark: 0,
        });
        grid.push(row_cells);
    }
    for c in 0..columns.len() {
        let means: Vec<f64> = grid.iter().map(|r| r[c].mean).collect();
        for (r, mark) in marks(&means).into_iter().enumerate() {
            grid[r][c].mark = mark;
        }
    }
    for r in grid {
        rows.extend(r);
    }
    CompareReport {
        methods,
        tasks,
        seeds,
        rows,
        records,
        selections: Vec::new(),
    }
}

/// Markdown table: one row per method, one column per task plus the mean;
/// best in bold, second best underlined.
pub fn markdown_table(report: &CompareReport) -> String {
    let mut cols = report.tasks.clone();
    cols.push(AVERAGE_COLUMN.into());
    let mut s = format!("| method | {} |\n|---|{}\n", cols.join(" | "), "---|".repeat(cols.len()));
    for m in &report.methods {
        let cells: Vec<String> = cols
            .iter()
            .map(|t| {
                let r = report.row(m, t).expect("row for every method and column");
                let v = format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.std);
                match r.mark {
                    1 => format!("**{v}**"),
                    2 => format!("<u>{v}</u>"),
                    _ => v,
                }
            })
            .collect();
        s.push_str(&format!("| {m} | {} |\n", cells.join(" | ")));
    }
    s
}

#[derive(Debug, Serialize)]
struct CompareRunRow {
    method: String,
    task: String,
    seed: u64,
    k: Option<usize>,
    lambda: Option<f64>,
    learning_rate: Option<f64>,
    best_val_accuracy: f64,
    best_test_accuracy: f64,
    final_test_accuracy: f64,
}

#[derive(Debug, Serialize)]
struct CompareCsvRow {
    method: String,
    task: String,
    mean: f64,
    std: f64,
    n: usize,
    mark: String,
}

fn method_run_spec<'a>(
    cfg: &ExperimentConfig,
    m: &MethodSpec,
    cell: &SweepCell,
    seed: u64,
    data: &'a TaskData,
) -> Result<RunSpec<'a>> {
    let mut init = cfg.require_init()?.to_init_config(seed);
    if m.initializer.uses_vipamin_params() {
        init.k = cell.k;
        init.lambda = cell.lambda;
    }
    let mut train = cfg.require_train()?.clone();
    train.learning_rate = cell.learning_rate;
    Ok(RunSpec {
        initializer: m.initializer,
        mode: cfg.mode,
        init,
        train,
        diagnostics: cfg.diagnostics.clone(),
        seed,
        data,
    })
}

/// The setting reported for one `(method, task)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Absent for initializers without them.
    pub k: Option<usize>,
    pub lambda: Option<f64>,
    pub learning_rate: f64,
    /// Mean best-validation accuracy over the seeds.
    pub score: f64,
    /// Settings tried.
    pub candidates: usize,
}

/// Runs one method on one task. A single setting runs directly and any
/// failure is returned; with several, each is run on every seed and the
/// best mean validation accuracy among settings that completed on all
/// seeds wins.
fn run_method(
    cfg: &ExperimentConfig,
    bundle: &BackboneBundle,
    m: &MethodSpec,
    label: &str,
    seeds: &[u64],
    data: &[TaskData],
) -> Result<(Selection, Vec<RunRecord>)> {
    let grid = m.grid(cfg.require_train()?);
    let cells = grid.cells();
    if let [cell] = cells.as_slice() {
        let mut records = Vec::with_capacity(seeds.len());
        for (&seed, d) in seeds.iter().zip(data) {
            log::info!("compare {} {label} seed {seed}", m.label());
            let spec = method_run_spec(cfg, m, cell, seed, d)?;
            records.push(run_one(bundle, &spec).map_err(|a| a.error)?.outcome.record);
        }
        let score = mean(records.iter().map(|r| r.best_val_accuracy)).unwrap_or(0.0);
        return Ok((selection(m, cell, score, 1), records));
    }
    let report = sweep(&grid, seeds, |cell, index, seed| {
        let pos = seeds.iter().position(|&s| s == seed).expect("seed from list");
        log::info!("compare {} {label} cell {index} seed {seed}", m.label());
        let spec = method_run_spec(cfg, m, cell, seed, &data[pos])?;
        run_one(bundle, &spec).map(|r| r.outcome.record).map_err(|a| a.error)
    })?;
    let complete: Vec<(usize, (SweepCell, f64))> = report
        .cells
        .iter()
        .enumerate()
        .filter(|(_, c)| c.errors().next().is_none())
        .filter_map(|(i, c)| c.score.map(|s| (i, (c.cell, s))))
        .collect();
    let flat: Vec<(SweepCell, f64)> = complete.iter().map(|c| c.1).collect();
    let Some(j) = select_best(&flat) else {
        let first = report.cells.iter().flat_map(|c| c.errors()).next().unwrap_or("");
        return Err(Error::Undefined(format!(
            "no setting of {} completed on {label}: {first}",
            m.label()
        )));
    };
    let chosen = &report.cells[complete[j].0];
    Ok((
        selection(m, &chosen.cell, complete[j].1 .1, cells.len()),
        chosen.records().cloned().collect(),
    ))
}

fn selection(m: &MethodSpec, cell: &SweepCell, score: f64, candidates: usize) -> Selection {
    let own = m.initializer.uses_vipamin_params();
    Selection {
        k: own.then_some(cell.k),
        lambda: own.then_some(cell.lambda),
        learning_rate: cell.learning_rate,
        score,
        candidates,
    }
}

/// Runs every method on every task for every seed. Each `(task, seed)`
/// dataset is built once and shared by all methods.
pub fn run_comparison(cfg: &ExperimentConfig, bundle: &BackboneBundle) -> Result<CompareReport> {
    let section = cfg
        .compare
        .as_ref()
        .ok_or_else(|| Error::Config("a [compare] section is required".into()))?;
    let tasks = task_suite(cfg, &section.tasks)?;
    let labels: Vec<String> = tasks.iter().enumerate().map(|(i, t)| task_label(i, t)).collect();
    let mut records = vec![vec![Vec::new(); tasks.len()]; section.methods.len()];
    let mut selections = vec![Vec::with_capacity(tasks.len()); section.methods.len()];
    for (t, task) in tasks.iter().enumerate() {
        let data: Vec<TaskData> = section
            .seeds
            .iter()
            .map(|&s| TaskData::build(bundle, task, cfg.few_shot, s))
            .collect::<Result<_>>()?;
        for (mi, m) in section.methods.iter().enumerate() {
            let (sel, recs) = run_method(cfg, bundle, m, &labels[t], &section.seeds, &data)?;
            selections[mi].push(sel);
            records[mi][t] = recs;
        }
    }
    let mut report = aggregate(
        section.methods.iter().map(MethodSpec::label).collect(),
        labels,
        section.seeds.clone(),
        records,
    );
    report.selections = selections;
    Ok(report)
}

/// `compare`: mean ± std over seeds per (method, task) as CSV, JSON and a
/// markdown table.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    cfg.require_init()?;
    cfg.require_train()?;
    task_suite(
        cfg,
        &cfg.compare
            .as_ref()
            .ok_or_else(|| Error::Config("a [compare] section is required".into()))?
            .tasks,
    )?;
    let dir = prepare_run_dir(cfg)?;
    let bundle = obtain_backbone(cfg)?;
    let report = run_comparison(cfg, &bundle)?;
    write_compare(&dir, &report)?;
    Ok(dir)
}

pub fn write_compare(dir: &Path, report: &CompareReport) -> Result<()> {
    let mut runs = Vec::new();
    for (mi, (m, per_task)) in report.methods.iter().zip(&report.records).enumerate() {
        for (ti, (t, per_seed)) in report.tasks.iter().zip(per_task).enumerate() {
            let sel = report.selections.get(mi).and_then(|s| s.get(ti));
            for (&seed, r) in report.seeds.iter().zip(per_seed) {
                runs.push(CompareRunRow {
                    method: m.clone(),
                    task: t.clone(),
                    seed,
                    k: sel.and_then(|c| c.k),
                    lambda: sel.and_then(|c| c.lambda),
                    learning_rate: sel.map(|c| c.learning_rate),
                    best_val_accuracy: r.best_val_accuracy,
                    best_test_accuracy: r.best_test_accuracy,
                    final_test_accuracy: r.final_test_accuracy,
                });
            }
        }
    }
    write_csv(&dir.join("compare_runs.csv"), &runs)?;
    let rows: Vec<CompareCsvRow> = report
        .rows
        .iter()
        .map(|r| CompareCsvRow {
            method: r.method.clone(),
            task: r.task.clone(),
            mean: r.mean,
            std: r.std,
            n: r.values.len(),
            mark: match r.mark {
                1 => "best".into(),
                2 => "second".into(),
                _ => String::new(),
            },
        })
        .collect();
    write_csv(&dir.join("compare.csv"), &rows)?;
    write_json(&dir.join("compare.json"), report)?;
    std::fs::write(dir.join("compare.md"), markdown_table(report))
        .map_err(|e| Error::io(dir.join("compare.md"), e))?;
    let mut plot = PlotData::new("compare", "Mean test accuracy per task", "task index", "test accuracy");
    for m in &report.methods {
        let ys: Vec<f64> = report
            .tasks
            .iter()
            .map(|t| report.row(m, t).expect("row").mean)
            .collect();
        plot.series.push(Series {
            label: m.clone(),
            x: (0..ys.len()).map(|i| i as f64).collect(),
            y: ys,
        });
    }
    plot.write(&dir.join("compare.plot.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(best_test: f64) -> RunRecord {
        RunRecord {
            mode: PromptMode::Shallow,
            n_p: 1,
            backbone_digest: String::new(),
            epochs: Vec::new(),
            wall_clock_ms: Vec::new(),
            best_epoch: 0,
            best_val_accuracy: 0.0,
            best_test_accuracy: best_test,
            final_test_accuracy: best_test,
            divergence: None,
        }
    }

    #[test]
    fn normalization_maps_best_to_one_and_worst_to_zero() {
        let n = min_max_normalize(&[Some(0.5), Some(0.75), None, Some(1.0)]);
        assert_eq!(n, vec![Some(0.0), Some(0.5), None, Some(1.0)]);
    }

    #[test]
    fn constant_column_normalizes_to_one() {
        assert_eq!(min_max_normalize(&[Some(0.3)]), vec![Some(1.0)]);
        assert_eq!(min_max_normalize(&[Some(0.3), None, Some(0.3)]), vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(min_max_normalize(&[None, None]), vec![None, None]);
    }

    #[test]
    fn mean_and_sample_std_of_three_values() {
        let (m, s) = mean_std(&[0.1, 0.2, 0.6]);
        assert!((m - 0.3).abs() < 1e-15);
        // Squared deviations 0.04 + 0.01 + 0.09 over n - 1 = 2.
        assert!((s - 0.07f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
    }

    #[test]
    fn marks_rank_distinct_means() {
        assert_eq!(marks(&[0.5, 0.9, 0.7]), vec![0, 1, 2]);
        assert_eq!(marks(&[0.9, 0.9, 0.7]), vec![1, 1, 2]);
        assert_eq!(marks(&[0.4, 0.4]), vec![1, 1]);
    }

    #[test]
    fn aggregate_matches_a_direct_computation() {
        let values = [
            [[0.6, 0.7, 0.8], [0.2, 0.3, 0.4]],
            [[0.9, 0.9, 0.6], [0.5, 0.1, 0.3]],
        ];
        let records = values
            .iter()
            .map(|m| m.iter().map(|t| t.iter().map(|&v| record(v)).collect()).collect())
            .collect();
        let report = aggregate(
            vec!["a".into(), "b".into()],
            vec!["t0".into(), "t1".into()],
            vec![0, 1, 2],
            records,
        );
        assert_eq!(report.rows.len(), 2 * 3);
        for (mi, m) in ["a", "b"].iter().enumerate() {
            for (ti, t) in ["t0", "t1"].iter().enumerate() {
                let r = report.row(m, t).unwrap();
                let mean = values[mi][ti].iter().sum::<f64>() / 3.0;
                assert!((r.mean - mean).abs() < 1e-12);
                assert_eq!(r.values, values[mi][ti].to_vec());
            }
            let avg = report.row(m, AVERAGE_COLUMN).unwrap();
            for s in 0..3 {
                let direct = (values[mi][0][s] + values[mi][1][s]) / 2.0;
                assert!((avg.values[s] - direct).abs() < 1e-12);
            }
        }
        // t0: b (mean 0.8) beats a (mean 0.7).
        assert_eq!(report.row("b", "t0").unwrap().mark, 1);
        assert_eq!(report.row("a", "t0").unwrap().mark, 2);
        let table = markdown_table(&report);
        assert!(table.contains("**80.00 ± 17.32**"), "{table}");
        assert!(table.contains("<u>70.00 ± 10.00</u>"), "{table}");
        assert_eq!(table.lines().count(), 4);
    }

    #[test]
    fn identical_methods_produce_identical_columns() {
        let per_method = || vec![vec![record(0.5), record(0.7)], vec![record(0.2), record(0.4)]];
        let report = aggregate(
            vec!["x".into(), "y".into()],
            vec!["t0".into(), "t1".into()],
            vec![0, 1],
            vec![per_method(), per_method()],
        );
        for t in ["t0", "t1", AVERAGE_COLUMN] {
            let (x, y) = (report.row("x", t).unwrap(), report.row("y", t).unwrap());
            assert_eq!((&x.values, x.mean, x.std, x.mark), (&y.values, y.mean, y.std, y.mark));
            assert_eq!(x.mark, 1);
        }
    }

    #[test]
    fn metric_names_round_trip() {
        for m in [Metric::Entropy, Metric::Energy, Metric::DeepEnergy, Metric::Grassmann] {
            assert_eq!(Metric::parse(m.name()).unwrap(), m);
        }
        assert_eq!(Metric::parse("loss").unwrap_err().exit_code(), 2);
    }

    proptest! {
        #[test]
        fn normalized_values_lie_in_the_unit_interval(
            xs in proptest::collection::vec(proptest::option::of(0.0f64..1.0), 1..12)
        ) {
            let n = min_max_normalize(&xs);
            prop_assert_eq!(n.len(), xs.len());
            for (a, b) in xs.iter().zip(&n) {
                prop_assert_eq!(a.is_some(), b.is_some());
                if let Some(v) = b {
                    prop_assert!((0.0..=1.0).contains(v));
                }
            }
            if xs.iter().any(Option::is_some) {
                prop_assert!(n.iter().flatten().any(|&v| v == 1.0));
            }
        }

        #[test]
        fn exactly_one_group_holds_the_top_mark(xs in proptest::collection::vec(0.0f64..1.0, 1..8)) {
            let m = marks(&xs);
            let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (x, k) in xs.iter().zip(&m) {
                prop_assert_eq!(*k == 1, *x == max);
            }
        }
    }
}

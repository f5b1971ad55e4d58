//! The pieces every command shares: obtaining a backbone, building the
//! downstream data, running an initializer and training one run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Initializer};
use crate::archive::{backbone_archive, backbone_from_archive, TensorArchive};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::prompt_init::{
    spt_rand_init, vipamin_deep_init, vipamin_init, xavier_init, xavier_matrix, InitConfig,
    InitInputs, InitWarning,
};
use crate::rng;
use crate::task_synth::{
    few_shot_sample, make_shifted_task, pretrain_backbone, Dataset, PretrainReport, Split, TaskSpec,
};
use crate::trainer::{
    embed_examples, train, DiagnosticsConfig, Example, TrainAbort, TrainConfig, TrainInputs,
    TrainOutcome, TrainablePrompts,
};
use crate::vit::{ClassifierHead, FrozenBackbone, PromptMode, PromptSet, Provenance};

/// A frozen backbone plus the pretraining task that defines its canonical
/// subspace (needed to build shifted tasks).
#[derive(Debug, Clone)]
pub struct BackboneBundle {
    pub backbone: FrozenBackbone,
    pub pretrain_task: TaskSpec,
    /// Present when freshly pretrained.
    pub report: Option<PretrainReport>,
    /// Present when loaded from disk.
    pub path: Option<PathBuf>,
}

const PRETRAIN_KEY: &str = "pretrain";

/// Archive with the pretraining spec (and report) in its metadata.
pub fn bundle_archive(bundle: &BackboneBundle) -> Result<TensorArchive> {
    backbone_archive(
        &bundle.backbone,
        serde_json::json!({
            PRETRAIN_KEY: { "task": bundle.pretrain_task, "report": bundle.report },
        }),
    )
}

pub fn read_bundle(path: &Path) -> Result<BackboneBundle> {
    let archive = TensorArchive::read(path)?;
    let backbone = backbone_from_archive(&archive)?;
    let task = archive
        .metadata
        .get(PRETRAIN_KEY)
        .and_then(|p| p.get("task"))
        .ok_or_else(|| {
            Error::Archive(format!(
                "{} has no pretraining task in its metadata",
                path.display()
            ))
        })?;
    let pretrain_task: TaskSpec = serde_json::from_value(task.clone())?;
    Ok(BackboneBundle {
        backbone,
        pretrain_task,
        report: None,
        path: Some(path.to_path_buf()),
    })
}

/// Loads `backbone.path`, or pretrains from `backbone.pretrain`.
pub fn obtain_backbone(cfg: &ExperimentConfig) -> Result<BackboneBundle> {
    match (&cfg.backbone.path, &cfg.backbone.pretrain) {
        (Some(path), None) => read_bundle(path),
        (None, Some(spec)) => {
            let pretrained = pretrain_backbone(&spec.task, &spec.vit, &spec.train)?;
            Ok(BackboneBundle {
                backbone: pretrained.backbone,
                pretrain_task: spec.task.clone(),
                report: Some(pretrained.report),
                path: None,
            })
        }
        _ => Err(Error::Config(
            "backbone: exactly one of `path` or `pretrain` is required".into(),
        )),
    }
}

/// A downstream task, embedded once.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub dataset: Dataset,
    pub train_images: Vec<DenseMatrix>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskData {
    pub fn build(
        bundle: &BackboneBundle,
        task: &TaskSpec,
        few_shot: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut dataset = make_shifted_task(task, &bundle.pretrain_task)?;
        if let Some(k) = few_shot {
            dataset = few_shot_sample(&dataset, k, seed)?;
        }
        let bb = &bundle.backbone;
        if task.patch_grid != bb.config.patch_grid || task.patch_dim != bb.config.patch_dim {
            return Err(Error::Config(
                "task patch layout differs from the backbone's".into(),
            ));
        }
        let embed = |split| {
            let (images, labels) = dataset.split(split);
            embed_examples(bb, &images, &labels)
        };
        let train = embed(Split::Train)?;
        let val = embed(Split::Val)?;
        let test = embed(Split::Test)?;
        let (train_images, _) = dataset.split(Split::Train);
        Ok(Self {
            dataset,
            train_images,
            train,
            val,
            test,
        })
    }

    /// A seeded subset (at most `batch` images) of the training images, in
    /// dataset order.
    pub fn init_batch(&self, batch: usize, seed: u64) -> Vec<DenseMatrix> {
        let n = self.train_images.len();
        if batch >= n {
            return self.train_images.clone();
        }
        let mut g = rng::seeded(seed, 6);
        let mut idx = sample(&mut g, n, batch).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| self.train_images[i].clone()).collect()
    }
}

/// What to initialize.
#[derive(Debug, Clone, PartialEq)]
pub struct InitRequest {
    pub initializer: Initializer,
    pub mode: PromptMode,
    pub config: InitConfig,
}

/// The result of one initializer call, with its measured overhead.
#[derive(Debug, Clone)]
pub struct InitOutput {
    /// One set in shallow mode, one per block in deep mode.
    pub sets: Vec<PromptSet>,
    /// Backbone forward passes spent by the initializer.
    pub forward_count: usize,
    pub wall_clock_ms: f64,
    pub warnings: Vec<InitWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSummary {
    pub initializer: Initializer,
    pub mode: PromptMode,
    pub config: InitConfig,
    pub forward_count: usize,
    pub wall_clock_ms: f64,
    pub warnings: Vec<InitWarning>,
    pub backbone_digest: String,
}

/// Runs the requested initializer on the task's training images.
pub fn initialize(bundle: &BackboneBundle, data: &TaskData, req: &InitRequest) -> Result<InitOutput> {
    let bb = &bundle.backbone;
    let c = &req.config;
    let d = bb.config.embed_dim;
    let depth = bb.config.depth;
    let deep = req.mode == PromptMode::Deep;
    let images = data.init_batch(c.batch_size, c.seed);
    let before = bb.forward_count();
    let start = Instant::now();
    let mut warnings = Vec::new();
    let sets = match req.initializer {
        Initializer::Xavier if deep => (0..depth)
            .map(|l| {
                PromptSet::new(
                    xavier_matrix(c.n_p, d, c.seed, l as u64),
                    Provenance::Xavier { seed: c.seed },
                )
                .map(|p| p.with_layer(l))
            })
            .collect::<Result<Vec<_>>>()?,
        Initializer::Xavier => vec![xavier_init(c.n_p, d, c.seed)?],
        Initializer::SptRand => {
            let capture = bb.capture_batch(&images)?;
            if deep {
                (0..depth)
                    .map(|l| {
                        spt_rand_init(&capture.block_inputs[l], c.n_p, rng::derive_seed(c.seed, l as u64))
                            .map(|p| p.with_layer(l))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                vec![spt_rand_init(capture.embeddings(), c.n_p, c.seed)?]
            }
        }
        Initializer::Vipamin => {
            if deep {
                return Err(Error::Config(
                    "deep prompts are initialized with `vipamin-deep`".into(),
                ));
            }
            let inputs = InitInputs::capture(bb, &images)?;
            let out = vipamin_init(c, &inputs)?;
            warnings = out.warnings;
            vec![out.prompts]
        }
        Initializer::VipaminDeep => {
            if !deep {
                return Err(Error::Config("vipamin-deep requires deep mode".into()));
            }
            let layers = vipamin_deep_init(c, bb, &images)?;
            let mut sets = Vec::with_capacity(layers.len());
            for layer in layers {
                warnings.extend(layer.warnings);
                sets.push(layer.prompts);
            }
            sets
        }
    };
    Ok(InitOutput {
        sets,
        forward_count: bb.forward_count() - before,
        wall_clock_ms: start.elapsed().as_secs_f64() * 1e3,
        warnings,
    })
}

/// Trainable parameters from initializer output.
pub fn trainable(sets: &[PromptSet], mode: PromptMode) -> Result<TrainablePrompts> {
    match mode {
        PromptMode::Shallow => match sets {
            [one] => Ok(TrainablePrompts::Shallow(one.prompts.clone())),
            _ => Err(Error::Parameter(format!(
                "shallow mode needs one prompt set, got {}",
                sets.len()
            ))),
        },
        PromptMode::Deep => Ok(TrainablePrompts::Deep(
            sets.iter().map(|s| s.prompts.clone()).collect(),
        )),
    }
}

/// Prompt sets (tagged as trained) back from trainable parameters.
pub fn prompt_sets(prompts: &TrainablePrompts) -> Result<Vec<PromptSet>> {
    match prompts {
        TrainablePrompts::Shallow(p) => Ok(vec![PromptSet::new(p.clone(), Provenance::Trained)?]),
        TrainablePrompts::Deep(ps) => ps
            .iter()
            .enumerate()
            .map(|(l, p)| PromptSet::new(p.clone(), Provenance::Trained).map(|s| s.with_layer(l)))
            .collect(),
    }
}

/// One seeded run: every seed-dependent choice (few-shot draw aside) comes
/// from `seed`.
#[derive(Debug, Clone)]
pub struct RunSpec<'a> {
    pub initializer: Initializer,
    pub mode: PromptMode,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub diagnostics: DiagnosticsConfig,
    pub seed: u64,
    pub data: &'a TaskData,
}

pub struct RunResult {
    pub init: InitOutput,
    pub outcome: TrainOutcome,
}

pub fn run_one(bundle: &BackboneBundle, spec: &RunSpec<'_>) -> std::result::Result<RunResult, TrainAbort> {
    let mut init_cfg = spec.init.clone();
    init_cfg.seed = spec.seed;
    let init = initialize(
        bundle,
        spec.data,
        &InitRequest {
            initializer: spec.initializer,
            mode: spec.mode,
            config: init_cfg,
        },
    )?;
    let outcome = train_from(bundle, spec, &init.sets)?;
    Ok(RunResult { init, outcome })
}

/// Trains from given prompt sets with a zero-initialized head.
pub fn train_from(
    bundle: &BackboneBundle,
    spec: &RunSpec<'_>,
    sets: &[PromptSet],
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let mut train_cfg = spec.train.clone();
    train_cfg.seed = spec.seed;
    let mut diag = spec.diagnostics.clone();
    diag.seed = spec.seed;
    let bb = &bundle.backbone;
    train(TrainInputs {
        backbone: bb,
        train: &spec.data.train,
        val: &spec.data.val,
        test: &spec.data.test,
        prompts: trainable(sets, spec.mode)?,
        head: ClassifierHead::zeros(bb.config.embed_dim, spec.data.dataset.num_classes),
        config: &train_cfg,
        diagnostics: diag,
    })
}

//! Prompt tuning against a frozen backbone: loss and exact gradients for
//! prompts and head, AdamW with a warmup + cosine schedule, per-epoch
//! diagnostics, best-validation checkpointing, and hyperparameter sweeps.

pub mod backprop;
pub mod optim;
pub mod sweep;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    block_projection_energy, deep_projection_energy_pooled, entropy_over_traces, EnergyReport,
    EntropyReport, TokenSource, ValuePath, ENTROPY_SAMPLES,
};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::prompt_init::mean_pool_batch;
use crate::rng;
use crate::vit::{embed, forward, ClassifierHead, ForwardTrace, FrozenBackbone, PromptInput, PromptMode};

pub use backprop::{cross_entropy, trace_backward, TraceGrads};
pub use optim::{adamw_step, lr_schedule, AdamW, OptimizerState};
pub use sweep::{select_best, sweep, CellOutcome, SeedOutcome, SweepCell, SweepGrid, SweepReport};

/// One labeled sample, already embedded (`E_0`, `N_e x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub embeddings: DenseMatrix,
    pub label: usize,
}

/// Embeds every image; embedding is not a backbone forward pass.
pub fn embed_examples(
    backbone: &FrozenBackbone,
    images: &[DenseMatrix],
    labels: &[usize],
) -> Result<Vec<Example>> {
    if images.len() != labels.len() {
        return Err(Error::shape("embed_examples", "image and label counts differ"));
    }
    images
        .iter()
        .zip(labels)
        .map(|(img, &label)| {
            Ok(Example {
                embeddings: embed(img, backbone)?,
                label,
            })
        })
        .collect()
}

/// Trainable prompt parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainablePrompts {
    Shallow(DenseMatrix),
    /// One matrix per block.
    Deep(Vec<DenseMatrix>),
}

impl TrainablePrompts {
    pub fn input(&self) -> PromptInput<'_> {
        match self {
            TrainablePrompts::Shallow(p) => PromptInput::Shallow(p),
            TrainablePrompts::Deep(ps) => PromptInput::Deep(ps),
        }
    }

    pub fn mode(&self) -> PromptMode {
        match self {
            TrainablePrompts::Shallow(_) => PromptMode::Shallow,
            TrainablePrompts::Deep(_) => PromptMode::Deep,
        }
    }

    pub fn n_p(&self) -> usize {
        self.input().n_p()
    }

    pub fn matrices(&self) -> &[DenseMatrix] {
        match self {
            TrainablePrompts::Shallow(p) => std::slice::from_ref(p),
            TrainablePrompts::Deep(ps) => ps,
        }
    }

    pub fn matrices_mut(&mut self) -> &mut [DenseMatrix] {
        match self {
            TrainablePrompts::Shallow(p) => std::slice::from_mut(p),
            TrainablePrompts::Deep(ps) => ps,
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &DenseMatrix| DenseMatrix::zeros(m.rows(), m.cols());
        match self {
            TrainablePrompts::Shallow(p) => TrainablePrompts::Shallow(z(p)),
            TrainablePrompts::Deep(ps) => TrainablePrompts::Deep(ps.iter().map(z).collect()),
        }
    }
}

/// Gradients of the mean loss w.r.t. prompts and head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub prompts: TrainablePrompts,
    pub head: ClassifierHead,
}

/// Length of every trainable tensor, in optimizer order.
fn parameter_sizes(prompts: &TrainablePrompts, head: &ClassifierHead) -> Vec<usize> {
    let mut sizes: Vec<usize> = prompts.matrices().iter().map(|m| m.data().len()).collect();
    sizes.push(head.weight.data().len());
    sizes.push(head.bias.len());
    sizes
}

fn parameter_slices<'a>(
    prompts: &'a mut TrainablePrompts,
    head: &'a mut ClassifierHead,
) -> Vec<&'a mut [f64]> {
    let mut out: Vec<&mut [f64]> = prompts.matrices_mut().iter_mut().map(|m| m.data_mut()).collect();
    out.push(head.weight.data_mut());
    out.push(&mut head.bias);
    out
}

fn gradient_slices(g: &Gradients) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = g.prompts.matrices().iter().map(|m| m.data()).collect();
    out.push(g.head.weight.data());
    out.push(&g.head.bias);
    out
}

/// Mean cross-entropy over `batch` and its exact gradients w.r.t. the
/// prompt entries and head parameters. Backbone gradients are never formed.
pub fn loss_and_grads(
    prompts: &TrainablePrompts,
    head: &ClassifierHead,
    batch: &[Example],
    backbone: &FrozenBackbone,
) -> Result<(f64, Gradients)> {
    let (loss, grads, _) = loss_grads_predictions(prompts, head, batch, backbone)?;
    Ok((loss, grads))
}

/// Also returns whether each example was classified correctly.
fn loss_grads_predictions(
    prompts: &TrainablePrompts,
    head: &ClassifierHead,
    batch: &[Example],
    backbone: &FrozenBackbone,
) -> Result<(f64, Gradients, Vec<bool>)> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let classes = head.num_classes();
    let mut grads = Gradients {
        prompts: prompts.zeros_like(),
        head: ClassifierHead::zeros(head.weight.rows(), classes),
    };
    let mut total = 0.0;
    let mut correct = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.label >= classes {
            return Err(Error::Parameter(format!(
                "label {} outside head range {classes}",
                ex.label
            )));
        }
        let trace = forward(backbone, head, &ex.embeddings, prompts.input())?;
        let (loss, d_logits) = cross_entropy(&trace.logits, ex.label);
        total += loss;
        correct.push(argmax(&trace.logits) == ex.label);
        let g = trace_backward(&trace, backbone, head, &d_logits, false);
        for (acc, gp) in grads.prompts.matrices_mut().iter_mut().zip(&g.prompts) {
            acc.add_scaled(gp, 1.0);
        }
        grads.head.weight.add_scaled(&g.head.weight, 1.0);
        for (a, b) in grads.head.bias.iter_mut().zip(&g.head.bias) {
            *a += b;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let loss = total * inv;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0, loss });
    }
    for m in grads.prompts.matrices_mut() {
        m.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    grads.head.weight.data_mut().iter_mut().for_each(|v| *v *= inv);
    grads.head.bias.iter_mut().for_each(|v| *v *= inv);
    Ok((loss, grads, correct))
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `examples` classified correctly.
pub fn accuracy(
    prompts: &TrainablePrompts,
    head: &ClassifierHead,
    examples: &[Example],
    backbone: &FrozenBackbone,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in examples {
        let t = forward(backbone, head, &ex.embeddings, prompts.input())?;
        hits += usize::from(argmax(&t.logits) == ex.label);
    }
    Ok(hits as f64 / examples.len() as f64)
}

fn default_weight_decay() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    30
}
fn default_warmup() -> usize {
    3
}
fn default_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Learning rates explored by sweeps.
    #[serde(default)]
    pub lr_pool: Vec<f64>,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, epochs: usize, warmup_epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate,
            weight_decay: default_weight_decay(),
            epochs,
            warmup_epochs,
            batch_size: default_batch_size(),
            seed,
            lr_pool: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if self.lr_pool.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("lr_pool entries must be positive".into()));
        }
        Ok(())
    }
}

/// What gets measured after every epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Training samples used for the entropy measurement.
    #[serde(default = "default_entropy_samples")]
    pub entropy_samples: usize,
    /// Held-out samples used for projection energy (and, in deep mode, for
    /// the per-layer token inputs).
    #[serde(default = "default_entropy_samples")]
    pub energy_samples: usize,
    /// Seed of the entropy sample selection.
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}
fn default_entropy_samples() -> usize {
    ENTROPY_SAMPLES
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            entropy_samples: ENTROPY_SAMPLES,
            energy_samples: ENTROPY_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches; at epoch 0, the loss of
    /// the initial parameters on the full training split.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    /// Learning rate of the epoch's last update (0 at epoch 0).
    pub learning_rate: f64,
    /// Final-layer prompt attention entropy, head-averaged.
    pub entropy: Option<EntropyReport>,
    #[serde(default)]
    pub entropy_per_head: Vec<f64>,
    /// First-block energy of `(P W_V)^T` onto `SA(X_0)^T`.
    pub energy: Option<EnergyReport>,
    /// Same with `b_V` added to the prompt values.
    pub energy_with_bias: Option<f64>,
    /// Per-block energies (deep mode only).
    #[serde(default)]
    pub deep_energy: Vec<EnergyReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: PromptMode,
    pub n_p: usize,
    pub backbone_digest: String,
    /// Contiguous from epoch 0 (the initialization point).
    pub epochs: Vec<EpochRecord>,
    /// Wall-clock milliseconds per epoch, aligned with `epochs`.
    pub wall_clock_ms: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Test accuracy of the best-validation checkpoint.
    pub best_test_accuracy: f64,
    /// Test accuracy of the final parameters.
    pub final_test_accuracy: f64,
    #[serde(default)]
    pub divergence: Option<DivergenceInfo>,
}

impl RunRecord {
    /// Equality of everything except wall-clock timings.
    pub fn same_metrics(&self, other: &RunRecord) -> bool {
        let mut a = self.clone();
        let mut b = other.clone();
        a.wall_clock_ms.clear();
        b.wall_clock_ms.clear();
        a == b
    }

    pub fn last_epoch(&self) -> &EpochRecord {
        self.epochs.last().expect("record has an epoch-0 entry")
    }
}

/// Data and starting parameters for one training run.
#[derive(Debug, Clone)]
pub struct TrainInputs<'a> {
    pub backbone: &'a FrozenBackbone,
    pub train: &'a [Example],
    pub val: &'a [Example],
    pub test: &'a [Example],
    pub prompts: TrainablePrompts,
    pub head: ClassifierHead,
    pub config: &'a TrainConfig,
    pub diagnostics: DiagnosticsConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub best_prompts: TrainablePrompts,
    pub best_head: ClassifierHead,
    pub final_prompts: TrainablePrompts,
    pub final_head: ClassifierHead,
}

/// A run that stopped early; `partial` holds every completed epoch.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub partial: Option<Box<RunRecord>>,
}

impl From<Error> for TrainAbort {
    fn from(error: Error) -> Self {
        TrainAbort {
            error,
            partial: None,
        }
    }
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Fixed sample sets used by the per-epoch diagnostics.
struct DiagnosticSets<'a> {
    entropy: Vec<&'a Example>,
    energy: Vec<&'a Example>,
    /// Mean-pooled `E_0` of the energy samples (prompt independent).
    energy_e0: Option<DenseMatrix>,
}

impl<'a> DiagnosticSets<'a> {
    fn new(inputs: &TrainInputs<'a>) -> Result<Self> {
        let cfg = &inputs.diagnostics;
        if !cfg.enabled {
            return Ok(Self {
                entropy: Vec::new(),
                energy: Vec::new(),
                energy_e0: None,
            });
        }
        let mut order: Vec<usize> = (0..inputs.train.len()).collect();
        order.shuffle(&mut rng::seeded(cfg.seed, 7));
        let entropy = order
            .iter()
            .take(cfg.entropy_samples)
            .map(|&i| &inputs.train[i])
            .collect();
        // Held-out split when available, otherwise the training split.
        let pool = if inputs.val.is_empty() {
            inputs.train
        } else {
            inputs.val
        };
        let energy: Vec<&Example> = pool.iter().take(cfg.energy_samples).collect();
        let energy_e0 = if energy.is_empty() {
            None
        } else {
            let e0: Vec<DenseMatrix> = energy.iter().map(|e| e.embeddings.clone()).collect();
            Some(mean_pool_batch(&e0)?)
        };
        Ok(Self {
            entropy,
            energy,
            energy_e0,
        })
    }
}

fn measure(
    inputs: &TrainInputs<'_>,
    sets: &DiagnosticSets<'_>,
    prompts: &TrainablePrompts,
    head: &ClassifierHead,
    record: &mut EpochRecord,
) -> Result<()> {
    let backbone = inputs.backbone;
    if !sets.entropy.is_empty() && prompts.n_p() > 0 {
        let traces: Vec<ForwardTrace> = sets
            .entropy
            .iter()
            .map(|e| forward(backbone, head, &e.embeddings, prompts.input()))
            .collect::<Result<_>>()?;
        let m = entropy_over_traces(&traces, backbone.blocks.len() - 1)?;
        record.entropy = Some(m.averaged);
        record.entropy_per_head = m.per_head_mean;
    }
    let soft = |r: Result<EnergyReport>| match r {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("projection energy unavailable: {e}");
            None
        }
    };
    let first = &prompts.matrices()[0];
    if let Some(e0) = &sets.energy_e0 {
        let w = &backbone.blocks[0];
        record.energy = soft(block_projection_energy(first, e0, w, ValuePath::BiasFree));
        record.energy_with_bias =
            soft(block_projection_energy(first, e0, w, ValuePath::WithBias)).map(|r| r.value);
    }
    if let TrainablePrompts::Deep(layers) = prompts {
        if !sets.energy.is_empty() {
            let traces: Vec<ForwardTrace> = sets
                .energy
                .iter()
                .map(|e| forward(backbone, head, &e.embeddings, prompts.input()))
                .collect::<Result<_>>()?;
            match deep_projection_energy_pooled(
                &traces,
                layers,
                backbone,
                TokenSource::PreNorm,
                ValuePath::BiasFree,
            ) {
                Ok(r) => record.deep_energy = r,
                Err(e) => log::warn!("deep projection energy unavailable: {e}"),
            }
        }
    }
    Ok(())
}

fn evaluate_loss_accuracy(
    prompts: &TrainablePrompts,
    head: &ClassifierHead,
    examples: &[Example],
    backbone: &FrozenBackbone,
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut hits = 0usize;
    for ex in examples {
        let t = forward(backbone, head, &ex.embeddings, prompts.input())?;
        loss += cross_entropy(&t.logits, ex.label).0;
        hits += usize::from(argmax(&t.logits) == ex.label);
    }
    let n = examples.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Seeded, deterministic prompt-tuning loop.
///
/// Epoch 0 of the record holds the initialization-time metrics. The best
/// validation checkpoint (earliest on ties) is kept alongside the final
/// parameters. On divergence the completed epochs are returned in
/// [`TrainAbort::partial`].
pub fn train(inputs: TrainInputs<'_>) -> std::result::Result<TrainOutcome, TrainAbort> {
    let cfg = inputs.config;
    cfg.validate()?;
    if inputs.train.is_empty() {
        return Err(Error::Parameter("empty training split".into()).into());
    }
    let backbone = inputs.backbone;
    let digest = backbone.digest();
    let sets = DiagnosticSets::new(&inputs)?;
    let mut prompts = inputs.prompts.clone();
    let mut head = inputs.head.clone();

    let started = Instant::now();
    let (loss0, acc0) = evaluate_loss_accuracy(&prompts, &head, inputs.train, backbone)?;
    let mut epoch0 = EpochRecord {
        epoch: 0,
        train_loss: loss0,
        train_accuracy: acc0,
        val_accuracy: accuracy(&prompts, &head, inputs.val, backbone)?,
        learning_rate: 0.0,
        entropy: None,
        entropy_per_head: Vec::new(),
        energy: None,
        energy_with_bias: None,
        deep_energy: Vec::new(),
    };
    measure(&inputs, &sets, &prompts, &head, &mut epoch0)?;
    let mut record = RunRecord {
        mode: prompts.mode(),
        n_p: prompts.n_p(),
        backbone_digest: digest,
        best_epoch: 0,
        best_val_accuracy: epoch0.val_accuracy,
        epochs: vec![epoch0],
        wall_clock_ms: vec![started.elapsed().as_secs_f64() * 1e3],
        best_test_accuracy: 0.0,
        final_test_accuracy: 0.0,
        divergence: None,
    };
    let mut best = (prompts.clone(), head.clone());

    let n = inputs.train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let opt = AdamW::new(cfg.weight_decay);
    let mut state = OptimizerState::new(parameter_sizes(&prompts, &head));
    let mut shuffle_rng = rng::seeded(cfg.seed, 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| inputs.train[i].clone()).collect();
            lr = lr_schedule(step, total_steps, warmup_steps, cfg.learning_rate);
            let (loss, grads, correct) =
                match loss_grads_predictions(&prompts, &head, &batch, backbone) {
                    Ok(v) => v,
                    Err(Error::Divergence { loss, .. }) => {
                        record.divergence = Some(DivergenceInfo { step, loss });
                        return Err(TrainAbort {
                            error: Error::Divergence { step, loss },
                            partial: Some(Box::new(record)),
                        });
                    }
                    Err(e) => return Err(e.into()),
                };
            loss_sum += loss * batch.len() as f64;
            hits += correct.iter().filter(|&&c| c).count();
            {
                let g = gradient_slices(&grads);
                let mut p = parameter_slices(&mut prompts, &mut head);
                adamw_step(&mut p, &g, &mut state, lr, &opt)?;
            }
            step += 1;
        }
        if prompts.matrices().iter().any(|m| !m.is_finite()) || !head.weight.is_finite() {
            let loss = f64::NAN;
            record.divergence = Some(DivergenceInfo { step, loss });
            return Err(TrainAbort {
                error: Error::Divergence { step, loss },
                partial: Some(Box::new(record)),
            });
        }
        let mut er = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: hits as f64 / n as f64,
            val_accuracy: accuracy(&prompts, &head, inputs.val, backbone)?,
            learning_rate: lr,
            entropy: None,
            entropy_per_head: Vec::new(),
            energy: None,
            energy_with_bias: None,
            deep_energy: Vec::new(),
        };
        measure(&inputs, &sets, &prompts, &head, &mut er)?;
        if let Some(e) = er.energy.as_mut() {
            e.step = step;
        }
        for e in &mut er.deep_energy {
            e.step = step;
        }
        if er.val_accuracy > record.best_val_accuracy {
            record.best_val_accuracy = er.val_accuracy;
            record.best_epoch = epoch;
            best = (prompts.clone(), head.clone());
        }
        log::debug!(
            "epoch {epoch}: loss {:.4} train {:.3} val {:.3}",
            er.train_loss,
            er.train_accuracy,
            er.val_accuracy
        );
        record.epochs.push(er);
        record.wall_clock_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }

    record.final_test_accuracy = accuracy(&prompts, &head, inputs.test, backbone)?;
    record.best_test_accuracy = if record.best_epoch == cfg.epochs {
        record.final_test_accuracy
    } else {
        accuracy(&best.0, &best.1, inputs.test, backbone)?
    };
    Ok(TrainOutcome {
        record,
        best_prompts: best.0,
        best_head: best.1,
        final_prompts: prompts,
        final_head: head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::VitConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(depth: usize, d: usize, heads: usize, classes: usize) -> VitConfig {
        VitConfig {
            depth,
            embed_dim: d,
            num_heads: heads,
            ffn_hidden: 2 * d,
            patch_grid: (2, 2),
            patch_dim: 5,
            num_classes: classes,
            attention_bias: true,
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
    }

    fn examples(bb: &FrozenBackbone, n: usize, classes: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &bb.config;
        let images: Vec<DenseMatrix> = (0..n)
            .map(|_| random_matrix(&mut rng, c.num_patches(), c.patch_dim, 1.0))
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        embed_examples(bb, &images, &labels).unwrap()
    }

    fn random_head(rng: &mut ChaCha8Rng, d: usize, classes: usize) -> ClassifierHead {
        ClassifierHead {
            weight: random_matrix(rng, d, classes, 0.5),
            bias: (0..classes).map(|_| rng.random_range(-0.2..0.2)).collect(),
        }
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-7))
            .fold(0.0, f64::max)
    }

    /// Central differences of the mean loss over every trainable entry.
    fn numeric_grads(
        prompts: &TrainablePrompts,
        head: &ClassifierHead,
        batch: &[Example],
        bb: &FrozenBackbone,
    ) -> Vec<f64> {
        let eps = 1e-5;
        let loss_at = |p: &TrainablePrompts, h: &ClassifierHead| {
            loss_and_grads(p, h, batch, bb).unwrap().0
        };
        let mut out = Vec::new();
        for (mi, m) in prompts.matrices().iter().enumerate() {
            for j in 0..m.data().len() {
                let mut pp = prompts.clone();
                pp.matrices_mut()[mi].data_mut()[j] += eps;
                let mut pm = prompts.clone();
                pm.matrices_mut()[mi].data_mut()[j] -= eps;
                out.push((loss_at(&pp, head) - loss_at(&pm, head)) / (2.0 * eps));
            }
        }
        for j in 0..head.weight.data().len() {
            let mut hp = head.clone();
            hp.weight.data_mut()[j] += eps;
            let mut hm = head.clone();
            hm.weight.data_mut()[j] -= eps;
            out.push((loss_at(prompts, &hp) - loss_at(prompts, &hm)) / (2.0 * eps));
        }
        for j in 0..head.bias.len() {
            let mut hp = head.clone();
            hp.bias[j] += eps;
            let mut hm = head.clone();
            hm.bias[j] -= eps;
            out.push((loss_at(prompts, &hp) - loss_at(prompts, &hm)) / (2.0 * eps));
        }
        out
    }

    fn flatten(g: &Gradients) -> Vec<f64> {
        gradient_slices(g).concat()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let heads = if seed % 2 == 0 { 1 } else { 2 };
            let bb = FrozenBackbone::random(config(2, 8, heads, 3), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let head = random_head(&mut rng, 8, 3);
            let batch = examples(&bb, 3, 3, seed);
            let prompts = if seed % 4 < 2 {
                TrainablePrompts::Shallow(random_matrix(&mut rng, 4, 8, 1.0))
            } else {
                TrainablePrompts::Deep((0..2).map(|_| random_matrix(&mut rng, 4, 8, 1.0)).collect())
            };
            let (_, g) = loss_and_grads(&prompts, &head, &batch, &bb).unwrap();
            let err = max_rel_err(&flatten(&g), &numeric_grads(&prompts, &head, &batch, &bb));
            assert!(err <= 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn zero_head_gives_log_classes() {
        let bb = FrozenBackbone::random(config(1, 8, 2, 5), 1).unwrap();
        let head = ClassifierHead::zeros(8, 5);
        let batch = examples(&bb, 4, 5, 2);
        let p = TrainablePrompts::Shallow(DenseMatrix::zeros(2, 8));
        let (loss, _) = loss_and_grads(&p, &head, &batch, &bb).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_leaves_loss_and_grads() {
        let bb = FrozenBackbone::random(config(2, 8, 2, 3), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = random_head(&mut rng, 8, 3);
        let batch = examples(&bb, 3, 3, 5);
        let doubled: Vec<Example> = batch.iter().chain(&batch).cloned().collect();
        let p = TrainablePrompts::Shallow(random_matrix(&mut rng, 2, 8, 1.0));
        let (l1, g1) = loss_and_grads(&p, &head, &batch, &bb).unwrap();
        let (l2, g2) = loss_and_grads(&p, &head, &doubled, &bb).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        let (a, b) = (flatten(&g1), flatten(&g2));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_labels_and_empty_batches() {
        let bb = FrozenBackbone::random(config(1, 8, 2, 3), 1).unwrap();
        let head = ClassifierHead::zeros(8, 3);
        let p = TrainablePrompts::Shallow(DenseMatrix::zeros(1, 8));
        assert!(loss_and_grads(&p, &head, &[], &bb).is_err());
        let mut batch = examples(&bb, 1, 3, 0);
        batch[0].label = 3;
        assert!(matches!(
            loss_and_grads(&p, &head, &batch, &bb),
            Err(Error::Parameter(_))
        ));
    }

    fn run(
        bb: &FrozenBackbone,
        data: &[Example],
        cfg: &TrainConfig,
        prompts: TrainablePrompts,
        classes: usize,
    ) -> std::result::Result<TrainOutcome, TrainAbort> {
        train(TrainInputs {
            backbone: bb,
            train: &data[..8],
            val: &data[8..12],
            test: &data[12..],
            prompts,
            head: ClassifierHead::zeros(bb.config.embed_dim, classes),
            config: cfg,
            diagnostics: DiagnosticsConfig::default(),
        })
    }

    #[test]
    fn zero_epochs_records_initial_metrics_only() {
        let bb = FrozenBackbone::random(config(2, 8, 2, 2), 1).unwrap();
        let data = examples(&bb, 16, 2, 9);
        let cfg = TrainConfig::new(0.1, 0, 0, 1);
        let p = TrainablePrompts::Shallow(random_matrix(&mut ChaCha8Rng::seed_from_u64(1), 2, 8, 1.0));
        let out = run(&bb, &data, &cfg, p.clone(), 2).unwrap();
        assert_eq!(out.record.epochs.len(), 1);
        assert_eq!(out.record.epochs[0].epoch, 0);
        assert!((out.record.epochs[0].train_loss - 2f64.ln()).abs() < 1e-12);
        assert!(out.record.epochs[0].entropy.is_some());
        assert!(out.record.epochs[0].energy.is_some());
        assert_eq!(out.final_prompts, p);
    }

    #[test]
    fn training_is_deterministic_and_keeps_backbone_frozen() {
        let bb = FrozenBackbone::random(config(2, 8, 2, 2), 2).unwrap();
        let digest = bb.digest();
        let data = examples(&bb, 16, 2, 10);
        let mut cfg = TrainConfig::new(0.05, 3, 1, 7);
        cfg.batch_size = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let deep = TrainablePrompts::Deep((0..2).map(|_| random_matrix(&mut rng, 2, 8, 1.0)).collect());
        let a = run(&bb, &data, &cfg, deep.clone(), 2).unwrap();
        let b = run(&bb, &data, &cfg, deep, 2).unwrap();
        assert!(a.record.same_metrics(&b.record));
        assert_eq!(a.record.epochs.len(), 4);
        assert!(a.record.epochs.iter().enumerate().all(|(i, e)| e.epoch == i));
        assert_eq!(a.record.last_epoch().deep_energy.len(), 2);
        assert_eq!(bb.digest(), digest);
        assert_eq!(a.record.backbone_digest, digest);
    }

    #[test]
    fn training_reduces_loss() {
        let bb = FrozenBackbone::random(config(2, 8, 2, 2), 3).unwrap();
        let data = examples(&bb, 16, 2, 11);
        let mut cfg = TrainConfig::new(0.05, 20, 2, 3);
        cfg.batch_size = 4;
        let p = TrainablePrompts::Shallow(random_matrix(&mut ChaCha8Rng::seed_from_u64(5), 2, 8, 1.0));
        let out = run(&bb, &data, &cfg, p, 2).unwrap();
        let first = out.record.epochs[0].train_loss;
        let last = out.record.last_epoch().train_loss;
        assert!(last < first * 0.8, "{first} -> {last}");
    }

    #[test]
    fn single_class_task_has_zero_loss() {
        let bb = FrozenBackbone::random(config(1, 8, 2, 1), 4).unwrap();
        let data = examples(&bb, 16, 1, 12);
        let cfg = TrainConfig::new(0.1, 2, 0, 1);
        let p = TrainablePrompts::Shallow(data[0].embeddings.slice_rows(1..2));
        let out = run(&bb, &data, &cfg, p, 1).unwrap();
        assert!(out.record.last_epoch().train_loss < 1e-6);
        assert_eq!(out.record.final_test_accuracy, 1.0);
    }

    #[test]
    fn divergence_returns_partial_record() {
        let bb = FrozenBackbone::random(config(1, 8, 2, 2), 5).unwrap();
        let mut data = examples(&bb, 16, 2, 13);
        let cfg = TrainConfig::new(0.1, 2, 0, 1);
        let mut head = ClassifierHead::zeros(8, 2);
        head.weight[(0, 0)] = f64::MAX;
        data.truncate(16);
        let res = train(TrainInputs {
            backbone: &bb,
            train: &data[..8],
            val: &data[8..12],
            test: &data[12..],
            prompts: TrainablePrompts::Shallow(DenseMatrix::zeros(1, 8).map(|_| 0.1)),
            head,
            config: &cfg,
            diagnostics: DiagnosticsConfig {
                enabled: false,
                ..Default::default()
            },
        });
        // A huge head weight blows up the logits during the first epoch.
        match res {
            Err(TrainAbort { error, partial }) => {
                assert_eq!(error.exit_code(), 3);
                let p = partial.expect("partial record");
                assert_eq!(p.epochs.len(), 1);
                assert!(p.divergence.is_some());
            }
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = TrainConfig::new(0.1, 2, 3, 0);
        assert!(cfg.validate().is_err());
        cfg.warmup_epochs = 1;
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg.learning_rate = 0.1;
        assert!(cfg.validate().is_ok());
    }
}

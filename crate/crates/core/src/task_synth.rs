//! Synthetic pretraining and downstream tasks on a patch grid.
//!
//! Every generator writes its class signal and its noise inside a
//! `subspace_dim`-wide subspace of patch-pixel space. The pretraining task uses a canonical
//! basis `B_pre`; downstream tasks use `cos(theta) B_pre + sin(theta) B_perp`
//! with `B_perp` orthogonal to `B_pre`, so `shift_angle` moves a task from
//! the pretraining geometry (`0`) to directions the backbone never saw
//! (`pi/2`). This rotation model of task dissimilarity is a construction of
//! this crate, not something measured on real data.

use std::f64::consts::FRAC_PI_2;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng;
use crate::trainer::backprop::{backbone_loss_and_grads, backbone_slices_mut};
use crate::trainer::{adamw_step, argmax, lr_schedule, AdamW, OptimizerState, TrainConfig};
use crate::vit::{ClassifierHead, FrozenBackbone, VitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    /// Every patch carries a class-specific mean plus noise.
    GaussianClusters,
    /// One bright shape; the label is the grid cell holding it.
    ShapeLocation,
    /// One bright shape at a random cell; the label is its orientation.
    ShapeOrientation,
}

fn default_val() -> usize {
    4
}
fn default_test() -> usize {
    10
}
fn default_subspace() -> usize {
    4
}
fn default_signal() -> f64 {
    1.0
}
fn default_amplitude() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: GeneratorKind,
    pub num_classes: usize,
    /// Training samples per class.
    pub samples_per_class: usize,
    #[serde(default = "default_val")]
    pub val_per_class: usize,
    #[serde(default = "default_test")]
    pub test_per_class: usize,
    pub patch_grid: (usize, usize),
    pub patch_dim: usize,
    /// Rotation of the class-discriminative subspace, in `[0, pi/2]`.
    #[serde(default)]
    pub shift_angle: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Width of the discriminative subspace; `patch_dim` must be at least
    /// twice this.
    #[serde(default = "default_subspace")]
    pub subspace_dim: usize,
    /// Per-patch class-mean norm of gaussian clusters.
    #[serde(default = "default_signal")]
    pub signal: f64,
    /// Norm of the shape patch.
    #[serde(default = "default_amplitude")]
    pub shape_amplitude: f64,
    /// Gaussian clusters only: each class mean is nonzero on this many
    /// randomly chosen patches (all patches when absent), which makes the
    /// task depend on where the signal sits.
    #[serde(default)]
    pub active_patches: Option<usize>,
}

impl TaskSpec {
    pub fn num_patches(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return bad("num_classes and samples_per_class must be positive".into());
        }
        if self.num_patches() == 0 {
            return bad("patch grid is empty".into());
        }
        if self.subspace_dim == 0 || self.patch_dim < 2 * self.subspace_dim {
            return bad(format!(
                "patch_dim {} must be at least twice subspace_dim {}",
                self.patch_dim, self.subspace_dim
            ));
        }
        if !(0.0..=FRAC_PI_2 + 1e-12).contains(&self.shift_angle) {
            return bad(format!("shift_angle {} outside [0, pi/2]", self.shift_angle));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be nonnegative".into());
        }
        if let Some(a) = self.active_patches {
            if a == 0 || a > self.num_patches() {
                return bad(format!("active_patches {a} outside 1..={}", self.num_patches()));
            }
        }
        if self.kind == GeneratorKind::ShapeLocation && self.num_classes != self.num_patches() {
            return bad(format!(
                "shape-location needs one class per grid cell ({}), got {}",
                self.num_patches(),
                self.num_classes
            ));
        }
        Ok(())
    }

    /// Copy with a different rotation (and everything else unchanged).
    pub fn with_shift(&self, shift_angle: f64) -> Self {
        Self {
            shift_angle,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images (`num_patches x patch_dim`) with labels and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<DenseMatrix>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    /// Generation index of each sample; unique within a dataset and kept by
    /// [`few_shot_sample`].
    pub ids: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// `(images, labels)` of one split, in dataset order.
    pub fn split(&self, split: Split) -> (Vec<DenseMatrix>, Vec<usize>) {
        let idx = self.indices(split);
        (
            idx.iter().map(|&i| self.images[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for i in self.indices(split) {
            counts[self.labels[i]] += 1;
        }
        counts
    }
}

/// `[B_pre | B_perp]`: `2r` distinct pixel axes picked by `seed`. Axis
/// alignment matters: pixels outside a task's subspace are exactly zero, so
/// the optimizer's per-coordinate updates never touch their embedding rows
/// during pretraining.
fn canonical_bases(patch_dim: usize, r: usize, seed: u64) -> (DenseMatrix, DenseMatrix) {
    let mut g = rng::seeded(seed, 11);
    let mut axes: Vec<usize> = (0..patch_dim).collect();
    axes.shuffle(&mut g);
    let pick = |cols: &[usize]| DenseMatrix::from_fn(patch_dim, r, |i, j| f64::from(u8::from(i == cols[j])));
    (pick(&axes[..r]), pick(&axes[r..2 * r]))
}

/// The `patch_dim x subspace_dim` basis of `spec`'s discriminative subspace,
/// rotated by `spec.shift_angle` away from `pretrain`'s canonical basis.
pub fn discriminative_basis(spec: &TaskSpec, pretrain: &TaskSpec) -> Result<DenseMatrix> {
    if spec.patch_dim != pretrain.patch_dim || spec.subspace_dim != pretrain.subspace_dim {
        return Err(Error::Config(
            "shifted task must share patch_dim and subspace_dim with pretraining".into(),
        ));
    }
    let (pre, perp) = canonical_bases(pretrain.patch_dim, pretrain.subspace_dim, pretrain.seed);
    let (c, s) = (spec.shift_angle.cos(), spec.shift_angle.sin());
    if s == 0.0 {
        return Ok(pre);
    }
    Ok(pre.scale(c).add(&perp.scale(s)))
}

/// The canonical (unrotated) pretraining basis.
pub fn pretraining_basis(pretrain: &TaskSpec) -> DenseMatrix {
    canonical_bases(pretrain.patch_dim, pretrain.subspace_dim, pretrain.seed).0
}

fn gaussian_vec(g: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(g);
            scale * z
        })
        .collect()
}

/// Class codes in subspace coordinates, one `num_patches x r` matrix per
/// class for clusters, one `1 x r` pattern per class for shapes.
fn class_codes(spec: &TaskSpec) -> Vec<DenseMatrix> {
    let mut g = rng::seeded(spec.seed, 12);
    let r = spec.subspace_dim;
    match spec.kind {
        GeneratorKind::GaussianClusters => {
            let scale = spec.signal / (r as f64).sqrt();
            let np = spec.num_patches();
            (0..spec.num_classes)
                .map(|_| {
                    let data = gaussian_vec(&mut g, np * r, scale);
                    let mut code = DenseMatrix::new(np, r, data).expect("finite code");
                    if let Some(a) = spec.active_patches {
                        let mut cells: Vec<usize> = (0..np).collect();
                        cells.shuffle(&mut g);
                        for &p in &cells[a..] {
                            code.row_mut(p).fill(0.0);
                        }
                    }
                    code
                })
                .collect()
        }
        GeneratorKind::ShapeLocation => {
            let mut v = gaussian_vec(&mut g, r, 1.0);
            let n = crate::linalg::norm(&v);
            v.iter_mut().for_each(|x| *x *= spec.shape_amplitude / n);
            vec![DenseMatrix::row_vector(&v); spec.num_classes]
        }
        GeneratorKind::ShapeOrientation => {
            // A pattern turning through half a revolution inside a random
            // plane of the subspace, one step per class.
            let u = gaussian_vec(&mut g, r, 1.0);
            let mut w = gaussian_vec(&mut g, r, 1.0);
            let nu = crate::linalg::norm(&u);
            let u: Vec<f64> = u.iter().map(|x| x / nu).collect();
            let p = crate::linalg::dot(&w, &u);
            w.iter_mut().zip(&u).for_each(|(x, y)| *x -= p * y);
            let nw = crate::linalg::norm(&w);
            let w: Vec<f64> = w.iter().map(|x| x / nw).collect();
            (0..spec.num_classes)
                .map(|c| {
                    let a = std::f64::consts::PI * c as f64 / spec.num_classes as f64;
                    let v: Vec<f64> = u
                        .iter()
                        .zip(&w)
                        .map(|(x, y)| spec.shape_amplitude * (a.cos() * x + a.sin() * y))
                        .collect();
                    DenseMatrix::row_vector(&v)
                })
                .collect()
        }
    }
}

fn generate(spec: &TaskSpec, basis: &DenseMatrix) -> Dataset {
    let codes = class_codes(spec);
    let np = spec.num_patches();
    let r = spec.subspace_dim;
    let mut ds = Dataset {
        images: Vec::new(),
        labels: Vec::new(),
        splits: Vec::new(),
        ids: Vec::new(),
        num_classes: spec.num_classes,
    };
    let plan = [
        (Split::Train, spec.samples_per_class, 2u64),
        (Split::Val, spec.val_per_class, 3),
        (Split::Test, spec.test_per_class, 4),
    ];
    for (split, per_class, stream) in plan {
        let mut g = rng::seeded(spec.seed, stream);
        for class in 0..spec.num_classes {
            for _ in 0..per_class {
                // Built in subspace coordinates, then mapped to pixels, so
                // signal and noise both rotate with the task.
                let mut coords = DenseMatrix::zeros(np, r);
                match spec.kind {
                    GeneratorKind::GaussianClusters => coords = codes[class].clone(),
                    GeneratorKind::ShapeLocation => {
                        coords.row_mut(class).copy_from_slice(codes[class].row(0));
                    }
                    GeneratorKind::ShapeOrientation => {
                        let cell = g.random_range(0..np);
                        coords.row_mut(cell).copy_from_slice(codes[class].row(0));
                    }
                }
                if spec.noise_sigma > 0.0 {
                    for v in coords.data_mut() {
                        let e: f64 = StandardNormal.sample(&mut g);
                        *v += spec.noise_sigma * e;
                    }
                }
                ds.ids.push(ds.images.len());
                ds.images.push(coords.matmul_t(basis));
                ds.labels.push(class);
                ds.splits.push(split);
            }
        }
    }
    ds
}

/// The pretraining task: its own discriminative directions define the
/// canonical subspace.
pub fn make_pretrain_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let spec0 = spec.with_shift(0.0);
    Ok(generate(&spec0, &pretraining_basis(&spec0)))
}

/// A downstream task whose discriminative subspace is `spec.shift_angle`
/// away from `pretrain`'s.
pub fn make_shifted_task(spec: &TaskSpec, pretrain: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    pretrain.validate()?;
    Ok(generate(spec, &discriminative_basis(spec, pretrain)?))
}

/// Keeps exactly `k_shot` training samples per class, drawn without
/// replacement; validation and test samples are untouched. Dataset order is
/// preserved.
pub fn few_shot_sample(dataset: &Dataset, k_shot: usize, seed: u64) -> Result<Dataset> {
    if k_shot == 0 {
        return Err(Error::Parameter("k_shot must be at least 1".into()));
    }
    let mut g = rng::seeded(seed, 5);
    let mut keep = vec![true; dataset.len()];
    for class in 0..dataset.num_classes {
        let mut members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.splits[i] == Split::Train && dataset.labels[i] == class)
            .collect();
        if members.len() < k_shot {
            return Err(Error::Parameter(format!(
                "class {class} has {} training samples, {k_shot} requested",
                members.len()
            )));
        }
        members.shuffle(&mut g);
        for &i in &members[k_shot..] {
            keep[i] = false;
        }
    }
    let idx: Vec<usize> = (0..dataset.len()).filter(|&i| keep[i]).collect();
    Ok(Dataset {
        images: idx.iter().map(|&i| dataset.images[i].clone()).collect(),
        labels: idx.iter().map(|&i| dataset.labels[i]).collect(),
        splits: idx.iter().map(|&i| dataset.splits[i]).collect(),
        ids: idx.iter().map(|&i| dataset.ids[i]).collect(),
        num_classes: dataset.num_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    /// Accuracy on the training split after the last epoch.
    pub train_accuracy: f64,
    /// Accuracy on the test split after the last epoch.
    pub test_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub backbone: FrozenBackbone,
    pub report: PretrainReport,
}

/// Accuracy of the backbone's own head on `images`.
pub fn classification_accuracy(backbone: &FrozenBackbone, images: &[DenseMatrix], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let cap = backbone.capture_batch(images)?;
    let hits = cap
        .outputs
        .iter()
        .zip(labels)
        .filter(|(z, &y)| argmax(&backbone.head.logits(z.row(0))) == y)
        .count();
    Ok(hits as f64 / images.len() as f64)
}

/// Full-parameter training of a randomly initialized backbone on the
/// pretraining task. This is the only operation that changes backbone
/// weights; the forward counter is reset afterwards.
pub fn pretrain_backbone(spec: &TaskSpec, vit: &VitConfig, train: &TrainConfig) -> Result<Pretrained> {
    train.validate()?;
    vit.validate()?;
    if vit.num_classes != spec.num_classes
        || vit.patch_grid != spec.patch_grid
        || vit.patch_dim != spec.patch_dim
    {
        return Err(Error::Config(
            "backbone config must match the pretraining task's classes and patch layout".into(),
        ));
    }
    let data = make_pretrain_task(spec)?;
    let mut backbone = FrozenBackbone::random(vit.clone(), train.seed)?;
    let (images, labels) = data.split(Split::Train);
    let n = images.len();
    let steps_per_epoch = n.div_ceil(train.batch_size);
    let total = train.epochs * steps_per_epoch;
    let warmup = train.warmup_epochs * steps_per_epoch;
    let opt = AdamW::new(train.weight_decay);
    let mut state = OptimizerState::new(backbone_slices_mut(&mut backbone).iter().map(|s| s.len()));
    let mut order: Vec<usize> = (0..n).collect();
    let mut g = rng::seeded(train.seed, 1);
    let mut epoch_losses = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for epoch in 0..train.epochs {
        order.shuffle(&mut g);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let imgs: Vec<&DenseMatrix> = chunk.iter().map(|&i| &images[i]).collect();
            let labs: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads, _) = backbone_loss_and_grads(&backbone, &imgs, &labs).map_err(|e| match e {
                Error::Divergence { loss, .. } => Error::Divergence { step, loss },
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            let lr = lr_schedule(step, total, warmup, train.learning_rate);
            let gs = grads.slices();
            adamw_step(&mut backbone_slices_mut(&mut backbone), &gs, &mut state, lr, &opt)?;
            step += 1;
        }
        let mean = loss_sum / n as f64;
        log::info!("pretrain epoch {}: loss {mean:.4}", epoch + 1);
        epoch_losses.push(mean);
    }
    let (test_images, test_labels) = data.split(Split::Test);
    let report = PretrainReport {
        epoch_losses,
        train_accuracy: classification_accuracy(&backbone, &images, &labels)?,
        test_accuracy: classification_accuracy(&backbone, &test_images, &test_labels)?,
    };
    backbone.reset_forward_count();
    Ok(Pretrained { backbone, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn default_probe_steps() -> usize {
    300
}
fn default_probe_lr() -> f64 {
    0.05
}

/// Softmax-regression probe on frozen last-layer CLS features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_steps")]
    pub steps: usize,
    #[serde(default = "default_probe_lr")]
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: default_probe_steps(),
            learning_rate: default_probe_lr(),
        }
    }
}

/// Trains only a linear head (full batch AdamW, no weight decay) on the
/// prompt-free CLS features of the training split.
pub fn linear_probe(backbone: &FrozenBackbone, dataset: &Dataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let features = |split| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let (images, labels) = dataset.split(split);
        if images.is_empty() {
            return Ok((Vec::new(), labels));
        }
        let cap = backbone.capture_batch(&images)?;
        Ok((cap.outputs.iter().map(|z| z.row(0).to_vec()).collect(), labels))
    };
    let (xs, ys) = features(Split::Train)?;
    if xs.is_empty() {
        return Err(Error::Parameter("no training samples to probe".into()));
    }
    let d = xs[0].len();
    let c = dataset.num_classes;
    let mut head = ClassifierHead::zeros(d, c);
    let opt = AdamW::new(0.0);
    let mut state = OptimizerState::new([d * c, c]);
    for step in 0..cfg.steps {
        let mut gw = DenseMatrix::zeros(d, c);
        let mut gb = vec![0.0; c];
        for (x, &y) in xs.iter().zip(&ys) {
            let (_, dl) = crate::trainer::cross_entropy(&head.logits(x), y);
            for (i, xi) in x.iter().enumerate() {
                for (g, dv) in gw.row_mut(i).iter_mut().zip(&dl) {
                    *g += xi * dv;
                }
            }
            gb.iter_mut().zip(&dl).for_each(|(g, dv)| *g += dv);
        }
        let inv = 1.0 / xs.len() as f64;
        gw.data_mut().iter_mut().for_each(|v| *v *= inv);
        gb.iter_mut().for_each(|v| *v *= inv);
        let lr = lr_schedule(step, cfg.steps, 0, cfg.learning_rate);
        adamw_step(
            &mut [head.weight.data_mut(), &mut head.bias],
            &[gw.data(), &gb],
            &mut state,
            lr,
            &opt,
        )?;
    }
    let acc = |xs: &[Vec<f64>], ys: &[usize]| {
        if xs.is_empty() {
            return 0.0;
        }
        let hits = xs.iter().zip(ys).filter(|(x, &y)| argmax(&head.logits(x)) == y).count();
        hits as f64 / xs.len() as f64
    };
    let (tx, ty) = features(Split::Test)?;
    Ok(ProbeResult {
        train_accuracy: acc(&xs, &ys),
        test_accuracy: acc(&tx, &ty),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: GeneratorKind, classes: usize) -> TaskSpec {
        TaskSpec {
            kind,
            num_classes: classes,
            samples_per_class: 6,
            val_per_class: 2,
            test_per_class: 3,
            patch_grid: (2, 2),
            patch_dim: 8,
            shift_angle: 0.0,
            noise_sigma: 0.3,
            seed: 5,
            subspace_dim: 3,
            signal: 1.0,
            shape_amplitude: 3.0,
            active_patches: None,
        }
    }

    #[test]
    fn zero_noise_makes_classes_constant() {
        let mut s = spec(GeneratorKind::GaussianClusters, 3);
        s.noise_sigma = 0.0;
        let ds = make_pretrain_task(&s).unwrap();
        for c in 0..3 {
            let members: Vec<&DenseMatrix> = (0..ds.len())
                .filter(|&i| ds.labels[i] == c)
                .map(|i| &ds.images[i])
                .collect();
            assert!(members.iter().all(|m| *m == members[0]));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [
            GeneratorKind::GaussianClusters,
            GeneratorKind::ShapeLocation,
            GeneratorKind::ShapeOrientation,
        ] {
            let s = spec(kind, 4);
            assert_eq!(make_pretrain_task(&s).unwrap(), make_pretrain_task(&s).unwrap());
            let t = s.with_shift(0.7);
            assert_eq!(make_shifted_task(&t, &s).unwrap(), make_shifted_task(&t, &s).unwrap());
        }
    }

    #[test]
    fn split_counts_and_disjointness() {
        let ds = make_pretrain_task(&spec(GeneratorKind::GaussianClusters, 3)).unwrap();
        assert_eq!(ds.class_counts(Split::Train), vec![6; 3]);
        assert_eq!(ds.class_counts(Split::Val), vec![2; 3]);
        assert_eq!(ds.class_counts(Split::Test), vec![3; 3]);
        let mut ids = ds.ids.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), ds.len());
    }

    #[test]
    fn zero_shift_reproduces_pretraining() {
        let s = spec(GeneratorKind::GaussianClusters, 3);
        assert_eq!(make_shifted_task(&s, &s).unwrap(), make_pretrain_task(&s).unwrap());
    }

    #[test]
    fn right_angle_shift_is_orthogonal() {
        let s = spec(GeneratorKind::ShapeLocation, 4);
        let t = s.with_shift(FRAC_PI_2);
        let cross = discriminative_basis(&t, &s).unwrap().t_matmul(&pretraining_basis(&s));
        assert!(cross.max_abs() <= 1e-10, "{}", cross.max_abs());
        // Bases are orthonormal at any angle.
        let b = discriminative_basis(&s.with_shift(0.4), &s).unwrap();
        assert!(b.t_matmul(&b).max_abs_diff(&DenseMatrix::identity(3)) < 1e-12);
    }

    #[test]
    fn shape_location_label_is_the_bright_cell() {
        let mut s = spec(GeneratorKind::ShapeLocation, 4);
        s.noise_sigma = 0.0;
        let ds = make_pretrain_task(&s).unwrap();
        for (img, &y) in ds.images.iter().zip(&ds.labels) {
            let norms: Vec<f64> = (0..4).map(|r| crate::linalg::norm(img.row(r))).collect();
            assert_eq!(argmax(&norms), y);
            assert!((norms[y] - 3.0).abs() < 1e-12);
        }
        assert!(make_pretrain_task(&spec(GeneratorKind::ShapeLocation, 5)).is_err());
    }

    #[test]
    fn orthogonal_means_are_linearly_separable() {
        // Two classes whose noise-free images are orthogonal are perfectly
        // separated by the sign of <x, mu_0 - mu_1>.
        let mut s = spec(GeneratorKind::GaussianClusters, 2);
        s.noise_sigma = 0.0;
        let ds = make_pretrain_task(&s).unwrap();
        let mean = |c: usize| {
            let i = ds.labels.iter().position(|&y| y == c).unwrap();
            ds.images[i].clone()
        };
        let (m0, m1) = (mean(0), mean(1));
        // Remove the overlap to make the two means exactly orthogonal.
        let dot = crate::linalg::dot(m0.data(), m1.data());
        let m1o = m1.sub(&m0.scale(dot / m0.frobenius_norm_sq()));
        let w = m0.sub(&m1o);
        for (img, y) in [(m0.clone(), 0), (m1o.clone(), 1)] {
            let score = crate::linalg::dot(w.data(), img.data());
            assert_eq!(usize::from(score < 0.0), y);
        }
    }

    #[test]
    fn few_shot_sampling() {
        let ds = make_pretrain_task(&spec(GeneratorKind::GaussianClusters, 5)).unwrap();
        assert_eq!(few_shot_sample(&ds, 6, 0).unwrap(), ds);
        let one = few_shot_sample(&ds, 1, 3).unwrap();
        assert_eq!(one.indices(Split::Train).len(), 5);
        assert_eq!(one.split(Split::Test), ds.split(Split::Test));
        assert!(few_shot_sample(&ds, 7, 0).is_err());

        // Oracle: per class, shuffle that class's training indices with the
        // same generator sequence and keep the first k.
        let k = 2;
        let got = few_shot_sample(&ds, k, 9).unwrap();
        let mut g = rng::seeded(9, 5);
        let mut expected = Vec::new();
        for c in 0..5 {
            let mut m: Vec<usize> = ds
                .indices(Split::Train)
                .into_iter()
                .filter(|&i| ds.labels[i] == c)
                .collect();
            m.shuffle(&mut g);
            expected.extend_from_slice(&m[..k]);
        }
        expected.sort_unstable();
        let got_train: Vec<usize> = got
            .indices(Split::Train)
            .into_iter()
            .map(|i| got.ids[i])
            .collect();
        assert_eq!(got_train, expected);
    }

    fn tiny_vit(classes: usize) -> VitConfig {
        VitConfig {
            depth: 1,
            embed_dim: 8,
            num_heads: 2,
            ffn_hidden: 16,
            patch_grid: (2, 2),
            patch_dim: 8,
            num_classes: classes,
            attention_bias: true,
        }
    }

    #[test]
    fn zero_epoch_pretraining_is_random_init() {
        let s = spec(GeneratorKind::GaussianClusters, 3);
        let cfg = TrainConfig::new(0.01, 0, 0, 4);
        let p = pretrain_backbone(&s, &tiny_vit(3), &cfg).unwrap();
        assert_eq!(p.backbone.digest(), FrozenBackbone::random(tiny_vit(3), 4).unwrap().digest());
    }

    #[test]
    fn pretraining_learns_and_is_reproducible() {
        let s = spec(GeneratorKind::GaussianClusters, 3);
        let mut cfg = TrainConfig::new(0.01, 15, 1, 4);
        cfg.batch_size = 6;
        let a = pretrain_backbone(&s, &tiny_vit(3), &cfg).unwrap();
        let b = pretrain_backbone(&s, &tiny_vit(3), &cfg).unwrap();
        assert_eq!(a.backbone.digest(), b.backbone.digest());
        assert!(a.report.train_accuracy >= 0.9, "{:?}", a.report);
        assert!(a.report.epoch_losses.last() < a.report.epoch_losses.first());
        assert!(pretrain_backbone(&s, &tiny_vit(4), &cfg).is_err());
        let probe = linear_probe(&a.backbone, &make_pretrain_task(&s).unwrap(), &ProbeConfig::default())
            .unwrap();
        assert!(probe.train_accuracy >= 0.9, "{probe:?}");
    }
}

//! Measurement instruments: prompt attention entropy, projection energy
//! (shallow and per-layer deep), and Grassmannian subspace distance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{projector_onto_colspace, svd, DenseMatrix};
use crate::prompt_init::mean_pool_batch;
use crate::vit::{value_space_attention, BlockWeights, ForwardTrace, FrozenBackbone, PromptMode};

/// Default number of samples for entropy measurements.
pub const ENTROPY_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Entropy (nats) of each prompt's renormalized attention over tokens.
    pub per_prompt: Vec<f64>,
    pub mean: f64,
    /// `ln(N_e)`.
    pub max_attainable: f64,
    pub layer_index: usize,
    pub sample_count: usize,
    /// Prompts whose attention row had no mass.
    #[serde(default)]
    pub degenerate_rows: Vec<usize>,
}

/// Entropy of each row of `S_PX` after renormalizing it to sum to one.
pub fn prompt_attention_entropy(s_px: &DenseMatrix) -> EntropyReport {
    let n_e = s_px.cols();
    let mut per_prompt = Vec::with_capacity(s_px.rows());
    let mut degenerate_rows = Vec::new();
    for i in 0..s_px.rows() {
        let row = s_px.row(i);
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            degenerate_rows.push(i);
            per_prompt.push(0.0);
            continue;
        }
        let h = row
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| {
                let p = v / total;
                -p * p.ln()
            })
            .sum::<f64>();
        per_prompt.push(h.max(0.0));
    }
    if !degenerate_rows.is_empty() {
        log::warn!("{} prompt attention rows carry no mass", degenerate_rows.len());
    }
    let mean = mean(&per_prompt);
    EntropyReport {
        per_prompt,
        mean,
        max_attainable: (n_e as f64).ln(),
        layer_index: 0,
        sample_count: 1,
        degenerate_rows,
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Entropy at one layer averaged over samples, from the head-averaged
/// attention, with the per-head means alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyMeasurement {
    pub averaged: EntropyReport,
    /// Mean prompt entropy of each head's own attention.
    pub per_head_mean: Vec<f64>,
}

pub fn entropy_over_traces(traces: &[ForwardTrace], layer: usize) -> Result<EntropyMeasurement> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Parameter("no traces to measure".into()))?;
    if first.n_p == 0 {
        return Err(Error::Parameter("entropy needs prompts".into()));
    }
    let rec0 = first
        .blocks
        .get(layer)
        .ok_or_else(|| Error::Parameter(format!("layer {layer} out of range")))?;
    let heads = rec0.attn.head_attention.len();
    let n_p = first.n_p;
    let mut per_prompt = vec![0.0; n_p];
    let mut per_head = vec![0.0; heads];
    let mut degenerate = Vec::new();
    let mut n_e = 0;
    for trace in traces {
        let rec = &trace.blocks[layer];
        let blocks = rec.attention_blocks();
        n_e = blocks.s_px.cols();
        let r = prompt_attention_entropy(&blocks.s_px);
        for (acc, v) in per_prompt.iter_mut().zip(&r.per_prompt) {
            *acc += v;
        }
        degenerate.extend(r.degenerate_rows);
        for (h, s) in rec.attn.head_attention.iter().enumerate() {
            let s_px = s.slice_rows(0..n_p).slice_cols(n_p..s.cols());
            per_head[h] += prompt_attention_entropy(&s_px).mean;
        }
    }
    let count = traces.len() as f64;
    per_prompt.iter_mut().for_each(|v| *v /= count);
    per_head.iter_mut().for_each(|v| *v /= count);
    degenerate.sort_unstable();
    degenerate.dedup();
    Ok(EntropyMeasurement {
        averaged: EntropyReport {
            mean: mean(&per_prompt),
            per_prompt,
            max_attainable: (n_e as f64).ln(),
            layer_index: layer,
            sample_count: traces.len(),
            degenerate_rows: degenerate,
        },
        per_head_mean: per_head,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub value: f64,
    pub a_rank: usize,
    pub b_rank: usize,
    pub layer_index: usize,
    pub step: usize,
}

fn energy_parts(a: &DenseMatrix, b: &DenseMatrix) -> Result<(f64, f64, DenseMatrix)> {
    if a.rows() != b.rows() {
        return Err(Error::shape(
            "projection_energy",
            format!("A has {} rows, B has {}", a.rows(), b.rows()),
        ));
    }
    let total = a.frobenius_norm_sq();
    if total.sqrt() < 1e-12 {
        return Err(Error::Undefined("projection energy of a zero matrix".into()));
    }
    let p = projector_onto_colspace(b)?;
    let inside = p.matmul(a).frobenius_norm_sq();
    Ok((inside, total, p))
}

/// `||P_B A||_F^2 / ||A||_F^2`, the share of `A`'s column mass inside the
/// column space of `B`.
pub fn projection_energy(a: &DenseMatrix, b: &DenseMatrix) -> Result<EnergyReport> {
    let (inside, total, _) = energy_parts(a, b)?;
    Ok(EnergyReport {
        value: inside / total,
        a_rank: svd(a)?.numerical_rank,
        b_rank: svd(b)?.numerical_rank,
        layer_index: 0,
        step: 0,
    })
}

/// `||(I - P_B) A||_F^2 / ||A||_F^2`.
pub fn projection_energy_complement(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    let (_, total, p) = energy_parts(a, b)?;
    let outside = a.sub(&p.matmul(a)).frobenius_norm_sq();
    Ok(outside / total)
}

/// How prompts enter value space for energy measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValuePath {
    /// `P W_V`.
    #[default]
    BiasFree,
    /// `P W_V + b_V`.
    WithBias,
}

/// Energy of `(P W_V)^T` (or with `b_V`) onto `SA(X)^T` for one block, where
/// `SA` is [`value_space_attention`] on the prompt-free tokens `x`.
pub fn block_projection_energy(
    prompts: &DenseMatrix,
    tokens: &DenseMatrix,
    weights: &BlockWeights,
    path: ValuePath,
) -> Result<EnergyReport> {
    let mut value = prompts.matmul(&weights.w_v);
    if path == ValuePath::WithBias {
        value = value.add_row_broadcast(&weights.b_v);
    }
    let sa = value_space_attention(tokens, weights);
    projection_energy(&value.transpose(), &sa.transpose())
}

/// Which token rows of a block feed the recomputed `SA_l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenSource {
    /// Block input before LayerNorm.
    #[default]
    PreNorm,
    /// LN1 output.
    PostNorm,
}

/// Per-block energy `(P_l W_V^l)^T -> SA_l(X_l)^T` on a deep-mode trace.
pub fn deep_projection_energy(
    trace: &ForwardTrace,
    prompt_layers: &[DenseMatrix],
    backbone: &FrozenBackbone,
) -> Result<Vec<EnergyReport>> {
    deep_projection_energy_pooled(
        std::slice::from_ref(trace),
        prompt_layers,
        backbone,
        TokenSource::PreNorm,
        ValuePath::BiasFree,
    )
}

/// Like [`deep_projection_energy`], with token inputs mean-pooled over
/// several traces of the same prompts.
pub fn deep_projection_energy_pooled(
    traces: &[ForwardTrace],
    prompt_layers: &[DenseMatrix],
    backbone: &FrozenBackbone,
    source: TokenSource,
    path: ValuePath,
) -> Result<Vec<EnergyReport>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Parameter("no traces to measure".into()))?;
    if traces.iter().any(|t| t.mode != PromptMode::Deep) {
        return Err(Error::Parameter("deep projection energy needs a deep-mode trace".into()));
    }
    if prompt_layers.len() != first.blocks.len() || prompt_layers.len() != backbone.blocks.len() {
        return Err(Error::Parameter("one prompt matrix per block is required".into()));
    }
    let mut out = Vec::with_capacity(prompt_layers.len());
    for (l, (p, w)) in prompt_layers.iter().zip(&backbone.blocks).enumerate() {
        let tokens: Vec<DenseMatrix> = traces
            .iter()
            .map(|t| match source {
                TokenSource::PreNorm => t.blocks[l].token_input(),
                TokenSource::PostNorm => t.blocks[l].token_attn_input(),
            })
            .collect();
        let x = mean_pool_batch(&tokens)?;
        let mut r = block_projection_energy(p, &x, w, path)?;
        r.layer_index = l;
        out.push(r);
    }
    Ok(out)
}

fn leading_row_space(reps: &DenseMatrix, dim: usize) -> Result<DenseMatrix> {
    Ok(svd(reps)?.v.slice_cols(0..dim))
}

/// Geodesic distance `sqrt(sum theta_i^2)` between the `subspace_dim`
/// leading row spaces of two representation sets. `None` uses the smaller
/// numerical rank.
///
/// Angles come from `atan2(sin, cos)` so that nearly coincident subspaces
/// keep full precision.
pub fn grassmannian_distance(
    reps_a: &DenseMatrix,
    reps_b: &DenseMatrix,
    subspace_dim: Option<usize>,
) -> Result<f64> {
    if reps_a.cols() != reps_b.cols() {
        return Err(Error::shape("grassmannian_distance", "representation widths differ"));
    }
    let rank_a = svd(reps_a)?.numerical_rank;
    let rank_b = svd(reps_b)?.numerical_rank;
    let dim = subspace_dim.unwrap_or(rank_a.min(rank_b));
    if dim == 0 || dim > rank_a || dim > rank_b {
        return Err(Error::Parameter(format!(
            "subspace dimension {dim} exceeds ranks ({rank_a}, {rank_b}) or is zero"
        )));
    }
    let qa = leading_row_space(reps_a, dim)?;
    let qb = leading_row_space(reps_b, dim)?;
    let cosines = svd(&qa.t_matmul(&qb))?.singular_values;
    let residual = qb.sub(&qa.matmul(&qa.t_matmul(&qb)));
    let mut sines = svd(&residual)?.singular_values;
    sines.reverse();
    let sum_sq: f64 = cosines
        .iter()
        .zip(&sines)
        .map(|(&c, &s)| s.atan2(c.min(1.0)).powi(2))
        .sum();
    Ok(sum_sq.sqrt())
}

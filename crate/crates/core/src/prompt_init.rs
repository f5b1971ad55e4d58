//! Prompt initializers: Xavier, SPT/rand, and VIPAMIN (matching plus
//! orthogonalizing, blended by `lambda`), including the per-layer deep
//! variant.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{cosine_rows, pseudoinverse, svd, top_k_indices, DenseMatrix};
use crate::rng;
use crate::vit::{value_space_attention, BlockWeights, FrozenBackbone, PromptSet, Provenance};

/// Batch size used to gather embeddings for VIPAMIN.
pub const DEFAULT_INIT_BATCH: usize = 256;

/// Below this `sigma_min / sigma_max`, `W_V` is reported as ill-conditioned.
pub const CONDITION_WARNING_RATIO: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub n_p: usize,
    /// Tokens averaged per prompt by the matching module.
    pub k: usize,
    /// Weight of the orthogonal component.
    pub lambda: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Add `b_K` to both sides before the key-space cosine.
    #[serde(default)]
    pub include_key_bias: bool,
}

fn default_batch() -> usize {
    DEFAULT_INIT_BATCH
}

impl InitConfig {
    pub fn validate(&self, token_count: usize) -> Result<()> {
        if self.n_p == 0 {
            return Err(Error::Config("n_p must be at least 1".into()));
        }
        if self.k == 0 || self.k > token_count {
            return Err(Error::Config(format!(
                "k = {} outside [1, {token_count}]",
                self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda = {} outside [0, 1]", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Non-fatal conditions noticed during initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitWarning {
    /// The prompt's key projection had (near) zero norm; its matched vector
    /// fell back to the mean of all tokens.
    DegenerateProjectedPrompt { row: usize },
    /// Some token key projections had zero norm and never match.
    DegenerateTokens { rows: Vec<usize> },
    /// `W_V` is numerically rank-deficient or badly conditioned.
    IllConditionedValue {
        sigma_ratio: f64,
        rank: usize,
        dim: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Initialized {
    pub prompts: PromptSet,
    pub warnings: Vec<InitWarning>,
}

/// Inputs gathered from one forward pass over a mini-batch.
#[derive(Debug, Clone)]
pub struct InitInputs {
    /// Per-sample token embeddings, each `N_e x d`.
    pub e0_batch: Vec<DenseMatrix>,
    /// Batch mean of `e0_batch`.
    pub e0_mean: DenseMatrix,
    /// Weights of the block the prompts enter.
    pub weights: BlockWeights,
    /// `SA(E_0)` computed on `e0_mean` by [`value_space_attention`].
    pub sa_e0: DenseMatrix,
    pub batch_digest: String,
}

impl InitInputs {
    /// Builds inputs from precomputed embeddings and block weights.
    pub fn from_embeddings(e0_batch: Vec<DenseMatrix>, weights: BlockWeights) -> Result<Self> {
        let e0_mean = mean_pool_batch(&e0_batch)?;
        if e0_mean.cols() != weights.w_v.rows() {
            return Err(Error::shape("InitInputs", "embedding width differs from W_V"));
        }
        let sa_e0 = value_space_attention(&e0_mean, &weights);
        let batch_digest = batch_digest(&e0_batch);
        Ok(Self {
            e0_batch,
            e0_mean,
            weights,
            sa_e0,
            batch_digest,
        })
    }

    /// Runs the backbone once over `images` and keeps the first block's
    /// token input.
    pub fn capture(backbone: &FrozenBackbone, images: &[DenseMatrix]) -> Result<Self> {
        let mut capture = backbone.capture_batch(images)?;
        let e0 = std::mem::take(&mut capture.block_inputs[0]);
        Self::from_embeddings(e0, backbone.blocks[0].clone())
    }
}

/// SHA-256 over the little-endian bytes of a batch of matrices.
pub fn batch_digest(batch: &[DenseMatrix]) -> String {
    let mut h = Sha256::new();
    for m in batch {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Xavier-uniform draws on `(-a, a)`, `a = sqrt(6 / (n_p + d))`, from the
/// given RNG stream.
pub fn xavier_matrix(n_p: usize, d: usize, seed: u64, stream: u64) -> DenseMatrix {
    let a = (6.0 / (n_p + d) as f64).sqrt();
    let mut rng = rng::seeded(seed, stream);
    DenseMatrix::from_fn(n_p, d, |_, _| loop {
        let x = rng.random_range(-a..a);
        if x != -a {
            break x;
        }
    })
}

pub fn xavier_init(n_p: usize, d: usize, seed: u64) -> Result<PromptSet> {
    if n_p == 0 || d == 0 {
        return Err(Error::Parameter("xavier_init needs n_p, d >= 1".into()));
    }
    PromptSet::new(xavier_matrix(n_p, d, seed, 0), Provenance::Xavier { seed })
}

/// Position-wise mean over the batch axis.
pub fn mean_pool_batch(e0_batch: &[DenseMatrix]) -> Result<DenseMatrix> {
    let first = e0_batch
        .first()
        .ok_or_else(|| Error::Parameter("mean pooling an empty batch".into()))?;
    let mut acc = DenseMatrix::zeros(first.rows(), first.cols());
    for m in e0_batch {
        if m.shape() != first.shape() {
            return Err(Error::shape("mean_pool_batch", "ragged batch"));
        }
        acc.add_scaled(m, 1.0);
    }
    Ok(acc.scale(1.0 / e0_batch.len() as f64))
}

/// Samples `n_p` token embeddings uniformly without replacement from the
/// flattened `(B * N_e) x d` pool.
pub fn spt_rand_init(e0_batch: &[DenseMatrix], n_p: usize, seed: u64) -> Result<PromptSet> {
    let first = e0_batch
        .first()
        .ok_or_else(|| Error::Parameter("spt/rand needs embeddings".into()))?;
    let per = first.rows();
    let total = per * e0_batch.len();
    if n_p == 0 || n_p > total {
        return Err(Error::Parameter(format!(
            "spt/rand asked for {n_p} prompts from a pool of {total}"
        )));
    }
    let mut rng = rng::seeded(seed, 0);
    // Partial forward Fisher-Yates.
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..n_p {
        let j = rng.random_range(i..total);
        idx.swap(i, j);
    }
    let mut out = DenseMatrix::zeros(n_p, first.cols());
    for (r, &flat) in idx[..n_p].iter().enumerate() {
        out.row_mut(r).copy_from_slice(e0_batch[flat / per].row(flat % per));
    }
    PromptSet::new(out, Provenance::SptRand { seed })
}

/// Replaces each prompt with the mean of the `k` rows of `e0_mean` whose key
/// projections are most cosine-similar to the prompt's key projection.
pub fn matching_init(
    p_rand: &PromptSet,
    e0_mean: &DenseMatrix,
    w_k: &DenseMatrix,
    b_k: Option<&[f64]>,
    k: usize,
) -> Result<Initialized> {
    let n_e = e0_mean.rows();
    if k == 0 || k > n_e {
        return Err(Error::Parameter(format!("k = {k} outside [1, {n_e}]")));
    }
    let project = |m: &DenseMatrix| {
        let p = m.matmul(w_k);
        match b_k {
            Some(b) => p.add_row_broadcast(b),
            None => p,
        }
    };
    let sim = cosine_rows(&project(&p_rand.prompts), &project(e0_mean))?;
    let mut warnings = Vec::new();
    if !sim.degenerate_b.is_empty() {
        warnings.push(InitWarning::DegenerateTokens {
            rows: sim.degenerate_b.clone(),
        });
    }
    let column_mean = e0_mean.column_means();
    let mut out = DenseMatrix::zeros(p_rand.len(), e0_mean.cols());
    for i in 0..p_rand.len() {
        if sim.degenerate_a.contains(&i) {
            log::warn!("prompt {i} has a degenerate key projection; using the token mean");
            warnings.push(InitWarning::DegenerateProjectedPrompt { row: i });
            out.row_mut(i).copy_from_slice(&column_mean);
            continue;
        }
        let chosen = top_k_indices(sim.matrix.row(i), k)?;
        let row = out.row_mut(i);
        for &j in &chosen {
            for (o, v) in row.iter_mut().zip(e0_mean.row(j)) {
                *o += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= k as f64);
    }
    Ok(Initialized {
        prompts: PromptSet::new(out, Provenance::Matching { k })?,
        warnings,
    })
}

/// Maps each prompt into value space (`x = p W_V + b_V`), removes the
/// component inside the row space of `sa_e0`, and maps back through the
/// affine inverse `(x_perp - b_V) W_V^+`. For invertible `W_V` this gives
/// `p_orth W_V + b_V = x_perp`.
pub fn orthogonalizing_init(
    p_rand: &PromptSet,
    sa_e0: &DenseMatrix,
    w_v: &DenseMatrix,
    b_v: &[f64],
) -> Result<Initialized> {
    let d = w_v.rows();
    if sa_e0.cols() != d || p_rand.prompts.cols() != d || b_v.len() != w_v.cols() {
        return Err(Error::shape("orthogonalizing_init", "dimension mismatch"));
    }
    let mut warnings = Vec::new();
    let wv_svd = svd(w_v)?;
    let sigma_max = wv_svd.singular_values[0];
    let sigma_min = *wv_svd.singular_values.last().unwrap();
    let ratio = if sigma_max > 0.0 { sigma_min / sigma_max } else { 0.0 };
    if wv_svd.numerical_rank < w_v.rows().min(w_v.cols()) || ratio < CONDITION_WARNING_RATIO {
        log::warn!("W_V is ill-conditioned (sigma_min/sigma_max = {ratio:e})");
        warnings.push(InitWarning::IllConditionedValue {
            sigma_ratio: ratio,
            rank: wv_svd.numerical_rank,
            dim: d,
        });
    }
    let w_v_pinv = pseudoinverse(w_v)?;

    let basis = svd(sa_e0)?.v_range();
    let x = p_rand.prompts.matmul(w_v).add_row_broadcast(b_v);
    let inside = x.matmul(&basis).matmul_t(&basis);
    let neg_bias: Vec<f64> = b_v.iter().map(|b| -b).collect();
    let x_perp = x.sub(&inside).add_row_broadcast(&neg_bias);
    let p_orth = x_perp.matmul(&w_v_pinv);
    Ok(Initialized {
        prompts: PromptSet::new(p_orth, Provenance::Orthogonalizing)?,
        warnings,
    })
}

/// `(1 - lambda) * matched + lambda * orthogonal`, row-wise.
pub fn blend(matched: &DenseMatrix, orthogonal: &DenseMatrix, lambda: f64) -> DenseMatrix {
    let mut out = matched.scale(1.0 - lambda);
    out.add_scaled(orthogonal, lambda);
    out
}

/// Both VIPAMIN components built from one random draw.
#[derive(Debug, Clone)]
pub struct VipaminComponents {
    pub p_rand: PromptSet,
    pub matched: Initialized,
    pub orthogonal: Initialized,
}

pub fn vipamin_components(
    config: &InitConfig,
    inputs: &InitInputs,
    stream: u64,
) -> Result<VipaminComponents> {
    let n_e = inputs.e0_mean.rows();
    let d = inputs.e0_mean.cols();
    config.validate(n_e)?;
    let p_rand = PromptSet::new(
        xavier_matrix(config.n_p, d, config.seed, stream),
        Provenance::Xavier { seed: config.seed },
    )?;
    let w = &inputs.weights;
    let b_k = config.include_key_bias.then_some(w.b_k.as_slice());
    let matched = matching_init(&p_rand, &inputs.e0_mean, &w.w_k, b_k, config.k)?;
    let orthogonal = orthogonalizing_init(&p_rand, &inputs.sa_e0, &w.w_v, &w.b_v)?;
    Ok(VipaminComponents {
        p_rand,
        matched,
        orthogonal,
    })
}

pub fn vipamin_init(config: &InitConfig, inputs: &InitInputs) -> Result<Initialized> {
    let c = vipamin_components(config, inputs, 0)?;
    let prompts = blend(&c.matched.prompts.prompts, &c.orthogonal.prompts.prompts, config.lambda);
    let mut warnings = c.matched.warnings;
    warnings.extend(c.orthogonal.warnings);
    Ok(Initialized {
        prompts: PromptSet::new(
            prompts,
            Provenance::Vipamin {
                k: config.k,
                lambda: config.lambda,
                seed: config.seed,
                batch_digest: inputs.batch_digest.clone(),
            },
        )?,
        warnings,
    })
}

/// Per-layer VIPAMIN for VPT-Deep. One prompt-free forward over `images`
/// supplies every block's token input; layer `l` uses its own block weights
/// and RNG stream `l`.
pub fn vipamin_deep_init(
    config: &InitConfig,
    backbone: &FrozenBackbone,
    images: &[DenseMatrix],
) -> Result<Vec<Initialized>> {
    let capture = backbone.capture_batch(images)?;
    let mut layers = Vec::with_capacity(backbone.blocks.len());
    for (l, inputs_l) in capture.block_inputs.into_iter().enumerate() {
        let inputs = InitInputs::from_embeddings(inputs_l, backbone.blocks[l].clone())?;
        let c = vipamin_components(config, &inputs, l as u64)?;
        let prompts =
            blend(&c.matched.prompts.prompts, &c.orthogonal.prompts.prompts, config.lambda);
        let mut warnings = c.matched.warnings;
        warnings.extend(c.orthogonal.warnings);
        layers.push(Initialized {
            prompts: PromptSet::new(
                prompts,
                Provenance::VipaminDeep {
                    k: config.k,
                    lambda: config.lambda,
                    seed: config.seed,
                    batch_digest: inputs.batch_digest.clone(),
                    layer: l,
                },
            )?
            .with_layer(l),
            warnings,
        });
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::projector_onto_colspace;
    use crate::vit::VitConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DenseMatrix {
        DenseMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn prompts(m: DenseMatrix) -> PromptSet {
        PromptSet::new(m, Provenance::Trained).unwrap()
    }

    #[test]
    fn xavier_bounds_determinism_and_variance() {
        let p = xavier_init(10, 30, 4).unwrap();
        let a = (6.0f64 / 40.0).sqrt();
        assert!(p.prompts.data().iter().all(|v| v.abs() < a));
        assert_eq!(p, xavier_init(10, 30, 4).unwrap());
        assert_ne!(p.prompts, xavier_init(10, 30, 5).unwrap().prompts);

        // 10^5 draws (n_p = 100, d = 1000): variance of U(-a, a) is a^2 / 3.
        let big = xavier_init(100, 1000, 1).unwrap();
        let a = (6.0f64 / 1100.0).sqrt();
        let n = big.prompts.data().len() as f64;
        let mean = big.prompts.data().iter().sum::<f64>() / n;
        let var = big.prompts.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var / (a * a / 3.0) - 1.0).abs() < 0.05);
    }

    #[test]
    fn mean_pool_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_rows(&mut rng, 3, 2);
        assert_eq!(mean_pool_batch(std::slice::from_ref(&x)).unwrap(), x);
        let z = mean_pool_batch(&[x.clone(), x.scale(-1.0)]).unwrap();
        assert!(z.max_abs() < 1e-15);

        let batch: Vec<DenseMatrix> = (0..4).map(|_| random_rows(&mut rng, 3, 2)).collect();
        let m = mean_pool_batch(&batch).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let s = batch[0][(i, j)] + batch[1][(i, j)] + batch[2][(i, j)] + batch[3][(i, j)];
                assert!((m[(i, j)] - s / 4.0).abs() < 1e-15);
            }
        }
        assert!(mean_pool_batch(&[]).is_err());
    }

    #[test]
    fn spt_rand_membership_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<DenseMatrix> = (0..3).map(|_| random_rows(&mut rng, 4, 5)).collect();
        let all_rows: Vec<&[f64]> = batch.iter().flat_map(|m| (0..4).map(move |i| m.row(i))).collect();

        let full = spt_rand_init(&batch, 12, 9).unwrap();
        let mut seen: Vec<usize> = (0..12)
            .map(|r| all_rows.iter().position(|x| *x == full.prompts.row(r)).unwrap())
            .collect();
        seen.sort();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());

        let part = spt_rand_init(&batch, 5, 3).unwrap();
        for r in 0..5 {
            assert!(all_rows.contains(&part.prompts.row(r)));
        }
        assert!(spt_rand_init(&batch, 13, 0).is_err());
    }

    #[test]
    fn spt_rand_matches_full_shuffle_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<DenseMatrix> = (0..2).map(|_| random_rows(&mut rng, 5, 3)).collect();
        let got = spt_rand_init(&batch, 4, 21).unwrap();
        // Oracle: complete forward Fisher-Yates over all 10 rows, keep a prefix.
        let mut oracle_rng = rng::seeded(21, 0);
        let mut order: Vec<usize> = (0..10).collect();
        for i in 0..order.len() {
            let j = oracle_rng.random_range(i..order.len());
            order.swap(i, j);
        }
        for r in 0..4 {
            let flat = order[r];
            assert_eq!(got.prompts.row(r), batch[flat / 5].row(flat % 5));
        }
    }

    #[test]
    fn matching_hand_example() {
        let tokens = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap();
        let p = prompts(DenseMatrix::from_rows(&[[1.0, 0.1]]).unwrap());
        let out = matching_init(&p, &tokens, &DenseMatrix::identity(2), None, 2).unwrap();
        assert_eq!(out.prompts.prompts.row(0), &[0.5, 0.5]);
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn matching_full_window_and_single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e0 = random_rows(&mut rng, 6, 3);
        let wk = random_rows(&mut rng, 3, 3);
        let p = prompts(random_rows(&mut rng, 4, 3));
        let out = matching_init(&p, &e0, &wk, None, 6).unwrap();
        let mean = e0.column_means();
        for i in 0..4 {
            for (a, b) in out.prompts.prompts.row(i).iter().zip(&mean) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let single = prompts(DenseMatrix::row_vector(e0.row(2)));
        let out = matching_init(&single, &e0, &DenseMatrix::identity(3), None, 1).unwrap();
        assert_eq!(out.prompts.prompts.row(0), e0.row(2));
        assert!(matching_init(&single, &e0, &wk, None, 7).is_err());
    }

    #[test]
    fn matching_degenerate_prompt_falls_back_to_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e0 = random_rows(&mut rng, 4, 2);
        let p = prompts(DenseMatrix::zeros(1, 2));
        let out = matching_init(&p, &e0, &DenseMatrix::identity(2), None, 1).unwrap();
        assert_eq!(out.warnings, vec![InitWarning::DegenerateProjectedPrompt { row: 0 }]);
        let mean = e0.column_means();
        assert!((out.prompts.prompts[(0, 0)] - mean[0]).abs() < 1e-15);
    }

    #[test]
    fn orthogonalizing_hand_example() {
        let sa = DenseMatrix::from_rows(&[[1.0, 0.0], [2.0, 0.0], [-1.0, 0.0]]).unwrap();
        let p = prompts(DenseMatrix::from_rows(&[[1.0, 1.0]]).unwrap());
        let out = orthogonalizing_init(&p, &sa, &DenseMatrix::identity(2), &[0.0, 0.0]).unwrap();
        assert!(out.prompts.prompts.max_abs_diff(&DenseMatrix::from_rows(&[[0.0, 1.0]]).unwrap()) < 1e-15);
    }

    #[test]
    fn orthogonalizing_full_span_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sa = random_rows(&mut rng, 6, 4);
        let wv = random_rows(&mut rng, 4, 4);
        let p = prompts(random_rows(&mut rng, 3, 4));
        let out = orthogonalizing_init(&p, &sa, &wv, &[0.0; 4]).unwrap();
        assert!(out.prompts.prompts.max_abs() < 1e-12);

        let bv = [0.3, -0.1, 0.2, 0.5];
        let out = orthogonalizing_init(&p, &sa, &wv, &bv).unwrap();
        let value = out.prompts.prompts.matmul(&wv).add_row_broadcast(&bv);
        assert!(value.max_abs() < 1e-12);
    }

    #[test]
    fn orthogonalizing_energy_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let d = rng.random_range(2..=16);
            let n_e = rng.random_range(1..d);
            let sa = random_rows(&mut rng, n_e, d);
            let wv = random_rows(&mut rng, d, d);
            let bv: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
            let p = prompts(random_rows(&mut rng, 3, d));
            let out = orthogonalizing_init(&p, &sa, &wv, &bv).unwrap();
            let value = out.prompts.prompts.matmul(&wv).add_row_broadcast(&bv);
            // Orthogonal to every row of SA(E_0).
            let inner = value.matmul_t(&sa);
            assert!(inner.max_abs() < 1e-9 * (1.0 + value.max_abs() * sa.max_abs()));
            let proj = projector_onto_colspace(&sa.transpose()).unwrap();
            let a = value.transpose();
            let energy = proj.matmul(&a).frobenius_norm_sq() / a.frobenius_norm_sq();
            assert!(energy < 1e-10, "{energy}");
        }
    }

    #[test]
    fn orthogonalizing_warns_on_singular_value_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sa = random_rows(&mut rng, 2, 3);
        let mut wv = random_rows(&mut rng, 3, 3);
        for j in 0..3 {
            wv[(2, j)] = wv[(0, j)] + wv[(1, j)];
        }
        let p = prompts(random_rows(&mut rng, 2, 3));
        let out = orthogonalizing_init(&p, &sa, &wv, &[0.0; 3]).unwrap();
        assert!(matches!(
            out.warnings[0],
            InitWarning::IllConditionedValue { rank: 2, .. }
        ));
    }

    fn tiny_inputs(seed: u64) -> InitInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = BlockWeights::random(6, 12, true, &mut rng);
        let batch: Vec<DenseMatrix> = (0..4).map(|_| random_rows(&mut rng, 5, 6)).collect();
        InitInputs::from_embeddings(batch, w).unwrap()
    }

    fn config(k: usize, lambda: f64) -> InitConfig {
        InitConfig {
            n_p: 3,
            k,
            lambda,
            batch_size: 4,
            seed: 11,
            include_key_bias: false,
        }
    }

    #[test]
    fn vipamin_endpoints_and_midpoint() {
        let inputs = tiny_inputs(9);
        let c = vipamin_components(&config(2, 0.5), &inputs, 0).unwrap();
        let p0 = vipamin_init(&config(2, 0.0), &inputs).unwrap().prompts.prompts;
        let p1 = vipamin_init(&config(2, 1.0), &inputs).unwrap().prompts.prompts;
        assert_eq!(p0, c.matched.prompts.prompts);
        assert_eq!(p1, c.orthogonal.prompts.prompts);

        // Recompute both components independently and average.
        let p_rand = xavier_init(3, 6, 11).unwrap();
        let m = matching_init(&p_rand, &inputs.e0_mean, &inputs.weights.w_k, None, 2).unwrap();
        let o = orthogonalizing_init(&p_rand, &inputs.sa_e0, &inputs.weights.w_v, &inputs.weights.b_v)
            .unwrap();
        let mid = vipamin_init(&config(2, 0.5), &inputs).unwrap().prompts.prompts;
        let expected = m.prompts.prompts.add(&o.prompts.prompts).scale(0.5);
        assert!(mid.max_abs_diff(&expected) < 1e-15);

        for lambda in [0.1, 0.25, 0.7, 0.9] {
            let p = vipamin_init(&config(2, lambda), &inputs).unwrap().prompts.prompts;
            let affine = p0.add(&p1.sub(&p0).scale(lambda));
            assert!(p.max_abs_diff(&affine) < 1e-12);
        }
    }

    #[test]
    fn vipamin_provenance_and_validation() {
        let inputs = tiny_inputs(10);
        let out = vipamin_init(&config(2, 0.5), &inputs).unwrap();
        match out.prompts.provenance {
            Provenance::Vipamin { k, lambda, seed, ref batch_digest } => {
                assert_eq!((k, lambda, seed), (2, 0.5, 11));
                assert_eq!(batch_digest, &inputs.batch_digest);
            }
            ref other => panic!("unexpected provenance {other:?}"),
        }
        assert!(vipamin_init(&config(0, 0.5), &inputs).is_err());
        assert!(vipamin_init(&config(6, 0.5), &inputs).is_err());
        assert!(vipamin_init(&config(2, 1.5), &inputs).is_err());
    }

    #[test]
    fn matching_membership_with_k1() {
        let inputs = tiny_inputs(12);
        let p = vipamin_init(&config(1, 0.0), &inputs).unwrap().prompts.prompts;
        for i in 0..p.rows() {
            assert!((0..inputs.e0_mean.rows()).any(|j| inputs.e0_mean.row(j) == p.row(i)));
        }
        let p = vipamin_init(&config(5, 0.0), &inputs).unwrap().prompts.prompts;
        for i in 1..p.rows() {
            assert!(p.row(i).iter().zip(p.row(0)).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn deep_init_single_forward_and_reduction() {
        let cfg = VitConfig {
            depth: 1,
            embed_dim: 6,
            num_heads: 2,
            ffn_hidden: 12,
            patch_grid: (2, 2),
            patch_dim: 3,
            num_classes: 2,
            attention_bias: true,
        };
        let bb = FrozenBackbone::random(cfg.clone(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let imgs: Vec<DenseMatrix> = (0..4).map(|_| random_rows(&mut rng, 4, 3)).collect();
        let ic = config(2, 0.5);

        bb.reset_forward_count();
        let deep = vipamin_deep_init(&ic, &bb, &imgs).unwrap();
        assert_eq!(bb.forward_count(), 1);
        bb.reset_forward_count();
        let inputs = InitInputs::capture(&bb, &imgs).unwrap();
        let shallow = vipamin_init(&ic, &inputs).unwrap();
        assert_eq!(bb.forward_count(), 1);
        assert_eq!(deep.len(), 1);
        assert_eq!(deep[0].prompts.prompts, shallow.prompts.prompts);

        let bb3 = FrozenBackbone::random(VitConfig { depth: 3, ..cfg }, 4).unwrap();
        bb3.reset_forward_count();
        let deep = vipamin_deep_init(&config(2, 1.0), &bb3, &imgs).unwrap();
        assert_eq!(bb3.forward_count(), 1);
        assert_eq!(deep.len(), 3);
        let capture = bb3.capture_batch(&imgs).unwrap();
        for (l, layer) in deep.iter().enumerate() {
            assert_eq!(layer.prompts.prompts.shape(), (3, 6));
            assert_eq!(layer.prompts.deep_layer, Some(l));
            let x_l = mean_pool_batch(&capture.block_inputs[l]).unwrap();
            let w = &bb3.blocks[l];
            let sa = value_space_attention(&x_l, w);
            let a = layer.prompts.prompts.matmul(&w.w_v).add_row_broadcast(&w.b_v).transpose();
            let p = projector_onto_colspace(&sa.transpose()).unwrap();
            assert!(p.matmul(&a).frobenius_norm_sq() / a.frobenius_norm_sq() <= 1e-10);
        }
    }
}
